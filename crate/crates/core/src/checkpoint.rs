//! Versioned JSON model checkpoints.
//!
//! ```json
//! {
//!   "format": "stmom-checkpoint",
//!   "version": 1,
//!   "architecture": { "kind": "slp", "hidden_size": 0, ... },
//!   "seed": 7,
//!   "assets": ["A", "B"],
//!   "feature_names": ["NORM_RET_1", ...],
//!   "features": { "horizons": [...], "macd": {...}, "vol_span": 60 },
//!   "parameters": [ { "name": "out.weight", "shape": [80, 2], "values": [...] } ]
//! }
//! ```
//!
//! Values are row-major float64 and round-trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::features::FeatureSpec;
use crate::models::{ArchitectureSpec, Network};
use crate::tensor_ad::{Parameters, Tensor};
use crate::{Error, Result};

pub const FORMAT: &str = "stmom-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: ArchitectureSpec,
    pub seed: u64,
    pub assets: Vec<String>,
    pub feature_names: Vec<String>,
    pub features: FeatureSpec,
    pub parameters: Vec<ParameterRecord>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, seed: u64, assets: Vec<String>, features: FeatureSpec) -> Result<Self> {
        let feature_names = features.names();
        if assets.len() != net.n_assets || feature_names.len() != net.n_features {
            return Err(Error::Checkpoint("asset or feature count differs from the network".into()));
        }
        Ok(Self {
            format: FORMAT.into(),
            version: VERSION,
            architecture: net.spec.clone(),
            seed,
            assets,
            feature_names,
            features,
            parameters: net
                .params
                .iter()
                .map(|(name, t)| ParameterRecord {
                    name: name.to_string(),
                    shape: t.shape.clone(),
                    values: t.data.clone(),
                })
                .collect(),
        })
    }

    /// Rebuilds the network, checking names and shapes against a fresh
    /// instance of the architecture.
    pub fn to_network(&self) -> Result<Network> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format '{}'", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = Network::new(
            self.architecture.clone(),
            self.assets.len(),
            self.feature_names.len(),
            &mut rng,
        )?;
        let expected: Vec<(String, Vec<usize>)> = template
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape.clone()))
            .collect();
        let got: Vec<(String, Vec<usize>)> = self
            .parameters
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect();
        if expected != got {
            return Err(Error::Checkpoint("parameter names or shapes do not match the architecture".into()));
        }
        let mut params = Parameters::new();
        for p in &self.parameters {
            params.add(p.name.clone(), Tensor::new(p.shape.clone(), p.values.clone())?);
        }
        Ok(Network { params, ..template })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        serde_json::from_reader(r).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchitectureKind;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_exact() {
        let features = FeatureSpec::default();
        let d = features.names().len();
        for kind in ArchitectureKind::ALL {
            let spec = ArchitectureSpec::new(kind, 3, 0.1).with_tau(4);
            let net = Network::new(spec, 2, d, &mut rand_chacha::ChaCha8Rng::seed_from_u64(4)).unwrap();
            let ck = Checkpoint::from_network(&net, 9, vec!["A".into(), "B".into()], features.clone()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.json");
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_network().unwrap(), net);
        }
    }

    #[test]
    fn rejects_tampered_shapes() {
        let features = FeatureSpec::default();
        let d = features.names().len();
        let spec = ArchitectureSpec::new(ArchitectureKind::Slp, 0, 0.0).with_tau(1);
        let net = Network::new(spec, 1, d, &mut rand_chacha::ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut ck = Checkpoint::from_network(&net, 1, vec!["A".into()], features).unwrap();
        ck.parameters[0].shape = vec![1, d];
        assert!(ck.to_network().is_err());
        ck.version = 2;
        assert!(matches!(ck.to_network(), Err(Error::Checkpoint(_))));
    }
}
