//! Daily price/return panels: CSV ingestion, winsorization and chronological splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::stats::EwmStats;
use crate::{Error, Result};

/// Largest tolerated fraction of calendar dates without an observation.
pub const MAX_MISSING_FRACTION: f64 = 0.10;
pub const DEFAULT_WINSOR_SPAN: usize = 252;
pub const DEFAULT_WINSOR_SIGMAS: f64 = 5.0;
/// Observations required before the winsorization band is enforced.
pub const WINSOR_MIN_PERIODS: usize = 10;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.9;

/// What the values in an input file represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Price,
    Return,
}

impl std::str::FromStr for ValueKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "price" | "prices" => Ok(ValueKind::Price),
            "return" | "returns" => Ok(ValueKind::Return),
            other => Err(Error::invalid(format!("unknown value kind `{other}`"))),
        }
    }
}

/// Date-by-asset matrix of daily simple returns on a shared calendar.
///
/// Leading gaps (before an asset's first observation) are NaN. Interior and
/// trailing gaps are zero-return days with the price carried forward.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsPanel {
    dates: Vec<NaiveDate>,
    assets: Vec<String>,
    returns: Matrix,
    prices: Option<Matrix>,
}

impl ReturnsPanel {
    pub fn new(
        dates: Vec<NaiveDate>,
        assets: Vec<String>,
        returns: Matrix,
        prices: Option<Matrix>,
    ) -> Result<Self> {
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("dates must be strictly increasing"));
        }
        let unique: BTreeSet<&String> = assets.iter().collect();
        if unique.len() != assets.len() {
            return Err(Error::invalid("duplicate asset identifiers"));
        }
        if returns.rows() != dates.len() || returns.cols() != assets.len() {
            return Err(Error::ShapeMismatch {
                op: "ReturnsPanel",
                detail: format!(
                    "returns {}x{} vs {} dates x {} assets",
                    returns.rows(),
                    returns.cols(),
                    dates.len(),
                    assets.len()
                ),
            });
        }
        if let Some(p) = &prices {
            if p.rows() != returns.rows() || p.cols() != returns.cols() {
                return Err(Error::ShapeMismatch {
                    op: "ReturnsPanel",
                    detail: "prices and returns differ in shape".into(),
                });
            }
        }
        Ok(Self {
            dates,
            assets,
            returns,
            prices,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn returns(&self) -> &Matrix {
        &self.returns
    }

    pub fn prices(&self) -> Option<&Matrix> {
        self.prices.as_ref()
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    /// Daily return of asset `i` on date index `t` (NaN if not yet listed).
    pub fn ret(&self, t: usize, i: usize) -> f64 {
        self.returns.get(t, i)
    }

    /// Price path of one asset: raw prices when present, otherwise the
    /// cumulative product of `1 + r` starting at 1.0 on the first return.
    pub fn price_path(&self, asset: usize) -> Vec<f64> {
        if let Some(p) = &self.prices {
            return p.column(asset);
        }
        let mut level = f64::NAN;
        (0..self.n_dates())
            .map(|t| {
                let r = self.returns.get(t, asset);
                if r.is_finite() {
                    level = if level.is_nan() { 1.0 + r } else { level * (1.0 + r) };
                }
                level
            })
            .collect()
    }

    /// Sub-panel on date indices `range`.
    pub fn slice_dates(&self, range: Range<usize>) -> ReturnsPanel {
        ReturnsPanel {
            dates: self.dates[range.clone()].to_vec(),
            assets: self.assets.clone(),
            returns: self.returns.slice_rows(range.clone()),
            prices: self.prices.as_ref().map(|p| p.slice_rows(range)),
        }
    }

    /// Returns a copy with replaced returns; prices are dropped.
    pub fn with_returns(&self, returns: Matrix) -> Result<ReturnsPanel> {
        ReturnsPanel::new(self.dates.clone(), self.assets.clone(), returns, None)
    }

    /// Writes the returns as a wide CSV. Values use 17 significant digits
    /// so that re-ingesting reproduces the matrix exactly; NaN is empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["date".to_string()];
        header.extend(self.assets.iter().cloned());
        w.write_record(&header)?;
        for (t, d) in self.dates.iter().enumerate() {
            let mut rec = vec![d.format("%Y-%m-%d").to_string()];
            rec.extend(self.returns.row(t).iter().map(|v| format_exact(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Number of missing (NaN) entries per asset.
    pub fn missing_report(&self) -> Vec<(String, usize)> {
        self.assets
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let missing = (0..self.n_dates())
                    .filter(|&t| !self.returns.get(t, i).is_finite())
                    .count();
                (a.clone(), missing)
            })
            .collect()
    }
}

/// 17-significant-digit rendering; empty for non-finite values.
pub fn format_exact(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        String::new()
    }
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()
}

/// Reads a long (`date,asset,value`) or wide (`date,<asset>...`) CSV.
///
/// Prices are converted with `p_t / p_{t-1} - 1`. The panel lives on the
/// union of all calendars; interior gaps carry the price forward.
pub fn ingest_csv(path: &Path, kind: ValueKind) -> Result<ReturnsPanel> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file, kind, path)
}

/// As [`ingest_csv`] but from any reader; `origin` is used in error messages.
pub fn ingest_reader<R: std::io::Read>(
    reader: R,
    kind: ValueKind,
    origin: &Path,
) -> Result<ReturnsPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    if header.first().map(|h| h.to_ascii_lowercase()) != Some("date".into()) {
        return Err(parse_err(1, "first column must be `date`".into()));
    }
    let long = header.len() == 3
        && header[1].eq_ignore_ascii_case("asset")
        && header[2].eq_ignore_ascii_case("value");

    // observations[asset][date] = value
    let mut assets: Vec<String> = Vec::new();
    let mut asset_index: HashMap<String, usize> = HashMap::new();
    let mut obs: Vec<BTreeMap<NaiveDate, f64>> = Vec::new();
    let mut calendar: BTreeSet<NaiveDate> = BTreeSet::new();

    if !long {
        for a in &header[1..] {
            if asset_index.insert(a.clone(), assets.len()).is_some() {
                return Err(parse_err(1, format!("duplicate asset column `{a}`")));
            }
            assets.push(a.clone());
            obs.push(BTreeMap::new());
        }
    }

    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let date = parse_date(&rec[0])
            .ok_or_else(|| parse_err(line, format!("unparseable date `{}`", &rec[0])))?;
        calendar.insert(date);
        let parse_value = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            let v: f64 = s
                .parse()
                .map_err(|_| parse_err(line, format!("unparseable value `{s}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value `{s}`")));
            }
            if kind == ValueKind::Price && v <= 0.0 {
                return Err(parse_err(line, format!("non-positive price `{s}`")));
            }
            Ok(Some(v))
        };
        if long {
            let name = rec[1].to_string();
            let Some(v) = parse_value(&rec[2])? else {
                continue;
            };
            let idx = *asset_index.entry(name.clone()).or_insert_with(|| {
                assets.push(name.clone());
                obs.push(BTreeMap::new());
                assets.len() - 1
            });
            if obs[idx].insert(date, v).is_some() {
                return Err(parse_err(line, format!("duplicate row for {name} on {date}")));
            }
        } else {
            for (j, field) in rec.iter().skip(1).enumerate() {
                if let Some(v) = parse_value(field)? {
                    if obs[j].insert(date, v).is_some() {
                        return Err(parse_err(line, format!("duplicate date {date}")));
                    }
                }
            }
        }
    }

    let dates: Vec<NaiveDate> = calendar.into_iter().collect();
    let t_len = dates.len();
    let n = assets.len();

    let mut rejected = Vec::new();
    for (a, o) in assets.iter().zip(&obs) {
        let missing = t_len - o.len();
        if t_len > 0 && missing as f64 >= MAX_MISSING_FRACTION * t_len as f64 {
            rejected.push(a.clone());
        }
    }
    if !rejected.is_empty() {
        return Err(Error::TooMuchMissing(rejected));
    }

    let mut returns = Matrix::filled(t_len, n, f64::NAN);
    let mut prices = (kind == ValueKind::Price).then(|| Matrix::filled(t_len, n, f64::NAN));
    for (j, o) in obs.iter().enumerate() {
        let mut started = false;
        let mut last_price = f64::NAN;
        for (t, d) in dates.iter().enumerate() {
            let v = o.get(d).copied();
            match kind {
                ValueKind::Return => {
                    if let Some(r) = v {
                        started = true;
                        returns.set(t, j, r);
                    } else if started {
                        returns.set(t, j, 0.0);
                    }
                }
                ValueKind::Price => {
                    let p = prices.as_mut().expect("price matrix");
                    match v {
                        Some(px) => {
                            if started {
                                returns.set(t, j, px / last_price - 1.0);
                            }
                            started = true;
                            last_price = px;
                            p.set(t, j, px);
                        }
                        None if started => {
                            returns.set(t, j, 0.0);
                            p.set(t, j, last_price);
                        }
                        None => {}
                    }
                }
            }
        }
    }
    ReturnsPanel::new(dates, assets, returns, prices)
}

/// Clips each return into `mean ± n_sigmas * std` of its causal EWM
/// statistics over the preceding (already clipped) observations.
///
/// `n_sigmas = f64::INFINITY` disables clipping.
pub fn winsorize(panel: &ReturnsPanel, span_days: usize, n_sigmas: f64) -> Result<ReturnsPanel> {
    if span_days < 2 {
        return Err(Error::invalid("winsorize span_days must be at least 2"));
    }
    if n_sigmas.is_nan() || n_sigmas <= 0.0 {
        return Err(Error::invalid("winsorize n_sigmas must be positive"));
    }
    if n_sigmas.is_infinite() {
        return Ok(panel.clone());
    }
    let (t_len, n) = (panel.n_dates(), panel.n_assets());
    let mut out = panel.returns.clone();
    for j in 0..n {
        let mut stats = EwmStats::with_span(span_days);
        for t in 0..t_len {
            let x = out.get(t, j);
            if !x.is_finite() {
                continue;
            }
            let mut y = x;
            if stats.count() >= WINSOR_MIN_PERIODS {
                if let (Some(m), Some(s)) = (stats.mean(), stats.std()) {
                    y = x.clamp(m - n_sigmas * s, m + n_sigmas * s);
                }
            }
            out.set(t, j, y);
            stats.push(y);
        }
    }
    // Keep prices consistent with the clipped returns.
    let prices = panel.prices.as_ref().map(|p| {
        let mut q = p.clone();
        for j in 0..n {
            for t in 1..t_len {
                let prev = q.get(t - 1, j);
                let r = out.get(t, j);
                if prev.is_finite() && r.is_finite() {
                    q.set(t, j, prev * (1.0 + r));
                }
            }
        }
        q
    });
    ReturnsPanel::new(panel.dates.clone(), panel.assets.clone(), out, prices)
}

/// Chronological split of `range` at `floor(fraction * len)`.
pub fn split_train_validation(
    range: Range<usize>,
    fraction: f64,
) -> Result<(Range<usize>, Range<usize>)> {
    if range.len() < 10 {
        return Err(Error::invalid(format!(
            "split needs at least 10 dates, got {}",
            range.len()
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("split fraction must lie in (0, 1)"));
    }
    let cut = (fraction * range.len() as f64).floor() as usize;
    if cut == 0 || cut >= range.len() {
        return Err(Error::invalid("split produces an empty block"));
    }
    let mid = range.start + cut;
    Ok((range.start..mid, mid..range.end))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ingest_str(s: &str, kind: ValueKind) -> Result<ReturnsPanel> {
        ingest_reader(s.as_bytes(), kind, Path::new("mem.csv"))
    }

    #[test]
    fn wide_prices_to_returns() {
        let p = ingest_str(
            "date,A,B\n2020-01-01,100,50\n2020-01-02,101,50\n2020-01-03,102,50\n",
            ValueKind::Price,
        )
        .unwrap();
        assert!(p.ret(0, 0).is_nan());
        assert!((p.ret(1, 0) - 0.01).abs() < 1e-15);
        assert!((p.ret(2, 0) - 0.009_900_990_099_009_9).abs() < 1e-12);
        assert_eq!(p.ret(1, 1), 0.0);
        assert_eq!(p.ret(2, 1), 0.0);
    }

    #[test]
    fn long_format_union_calendar_and_forward_fill() {
        let mut s = String::from("date,asset,value\n");
        for d in 1..=20 {
            s.push_str(&format!("2021-03-{d:02},X,0.01\n"));
            if d != 7 {
                s.push_str(&format!("2021-03-{d:02},Y,0.02\n"));
            }
        }
        let p = ingest_str(&s, ValueKind::Return).unwrap();
        assert_eq!(p.n_dates(), 20);
        assert_eq!(p.assets(), &["X".to_string(), "Y".to_string()]);
        assert_eq!(p.ret(6, 1), 0.0);
        assert_eq!(p.ret(7, 1), 0.02);
    }

    #[test]
    fn rejects_asset_with_too_much_missing() {
        let mut s = String::from("date,A,B\n");
        for d in 1..=20 {
            let b = if d <= 3 { String::new() } else { "0.01".into() };
            s.push_str(&format!("2021-01-{d:02},0.01,{b}\n"));
        }
        match ingest_str(&s, ValueKind::Return) {
            Err(Error::TooMuchMissing(v)) => assert_eq!(v, vec!["B".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let s = "date,A\n2020-01-01,0.1\n2020-01-02,abc\n";
        match ingest_str(s, ValueKind::Return) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_prices_give_zero_returns() {
        let mut s = String::from("date,A\n");
        for d in 1..=5 {
            s.push_str(&format!("2020-01-{d:02},42.5\n"));
        }
        let p = ingest_str(&s, ValueKind::Price).unwrap();
        for t in 1..5 {
            assert_eq!(p.ret(t, 0), 0.0);
        }
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_train_validation(0..100, 0.9).unwrap(), (0..90, 90..100));
        assert_eq!(split_train_validation(0..10, 0.9).unwrap(), (0..9, 9..10));
        assert_eq!(split_train_validation(5..16, 0.9).unwrap(), (5..14, 14..16));
        assert!(split_train_validation(0..9, 0.9).is_err());
        assert!(split_train_validation(0..20, 1.0).is_err());
    }

    #[test]
    fn winsorize_rejects_short_span() {
        let p = ingest_str("date,A\n2020-01-01,0.1\n", ValueKind::Return).unwrap();
        assert!(winsorize(&p, 1, 5.0).is_err());
    }
}
