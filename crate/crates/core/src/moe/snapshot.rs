use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GoatError, Result};
use crate::moe::layer::{GoatLayer, LayerMeta};
use crate::moe::router::Router;
use crate::numkit::Matrix;
use crate::svdseg::{ExpertPair, ExpertSource};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experts: usize,
    pub k: usize,
    pub scales: Vec<f64>,
    pub rho: f64,
    pub balance_coeff: f64,
    #[serde(flatten)]
    pub meta: LayerMeta,
}

impl GoatLayer {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            experts: self.num_experts(),
            k: self.k(),
            scales: self.scales.clone(),
            rho: self.rho,
            balance_coeff: self.balance_coeff,
            meta: self.meta.clone(),
        }
    }

    /// Write `w_base.txt`, `router.txt`, `b_<i>.txt`, `a_<i>.txt` and the
    /// manifest into `dir` (created if missing).
    pub fn save_snapshot(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.w_base.save(dir.join("w_base.txt"))?;
        self.router.wz.save(dir.join("router.txt"))?;
        for (i, p) in self.experts.iter().enumerate() {
            p.b.save(dir.join(format!("b_{i}.txt")))?;
            p.a.save(dir.join(format!("a_{i}.txt")))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(dir.join(MANIFEST), json + "\n")?;
        Ok(())
    }

    pub fn load_snapshot(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        if manifest.scales.len() != manifest.experts {
            return Err(GoatError::Parse(format!(
                "manifest lists {} scales for {} experts",
                manifest.scales.len(),
                manifest.experts
            )));
        }
        let w_base = Matrix::load(dir.join("w_base.txt"))?;
        let router = Router::new(Matrix::load(dir.join("router.txt"))?, manifest.k)?;
        let experts = (0..manifest.experts)
            .map(|i| {
                let b = Matrix::load(dir.join(format!("b_{i}.txt")))?;
                let a = Matrix::load(dir.join(format!("a_{i}.txt")))?;
                let source = match manifest.meta.segments.get(i) {
                    Some(seg) => ExpertSource::Segment(*seg),
                    None => ExpertSource::ZeroInit,
                };
                ExpertPair::new(b, a, source)
            })
            .collect::<Result<Vec<_>>>()?;
        GoatLayer::new(
            w_base,
            experts,
            router,
            manifest.scales,
            manifest.rho,
            manifest.balance_coeff,
            manifest.meta,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{build_goat_layer, LayerConfig, Variant};
    use crate::numkit::Rng;

    #[test]
    fn snapshot_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(12);
        let w0 = rng.normal_matrix(6, 6, 1.0);
        for variant in [Variant::GoatS, Variant::ZeroMoE] {
            let cfg = LayerConfig {
                experts: 3,
                k: 2,
                rank: 3,
                variant,
                ..LayerConfig::default()
            };
            let layer = build_goat_layer(&w0, &cfg, &mut rng).unwrap();
            let path = dir.path().join(variant.name());
            layer.save_snapshot(&path).unwrap();
            let back = GoatLayer::load_snapshot(&path).unwrap();
            assert_eq!(back.w_base, layer.w_base);
            assert_eq!(back.router.wz, layer.router.wz);
            assert_eq!(back.scales, layer.scales);
            assert_eq!(back.meta, layer.meta);
            for (a, b) in back.experts.iter().zip(&layer.experts) {
                assert_eq!(a.b, b.b);
                assert_eq!(a.a, b.a);
                assert_eq!(a.source, b.source);
            }
        }
    }

    #[test]
    fn manifest_records_hyperparameters() {
        let w0 = Rng::new(1).normal_matrix(8, 8, 1.0);
        let layer = build_goat_layer(
            &w0,
            &LayerConfig {
                experts: 4,
                rank: 8,
                ..LayerConfig::default()
            },
            &mut Rng::new(77),
        )
        .unwrap();
        let json = serde_json::to_value(layer.manifest()).unwrap();
        assert_eq!(json["experts"], 4);
        assert_eq!(json["k"], 2);
        assert_eq!(json["rank"], 8);
        assert_eq!(json["rho"], 10.0);
        assert_eq!(json["strategy"], "O");
        assert_eq!(json["variant"], "GOAT");
        assert_eq!(json["seed"], 77);
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            GoatLayer::load_snapshot(dir.path()),
            Err(GoatError::Io(_))
        ));
    }
}
