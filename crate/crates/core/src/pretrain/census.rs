//! Total versus trainable parameter accounting.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::encoder::EncoderConfig;
use crate::kg::FeatureTable;
use crate::params::ParamStore;

pub const FEATURES: &str = "features";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CensusEntry {
    pub name: String,
    pub count: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub total: usize,
    pub trainable: usize,
    pub ratio: f64,
    pub breakdown: Vec<CensusEntry>,
}

impl Census {
    pub fn from_entries(breakdown: Vec<CensusEntry>) -> Census {
        let total = breakdown.iter().map(|e| e.count).sum();
        let trainable = breakdown.iter().filter(|e| e.trainable).map(|e| e.count).sum();
        Census {
            total,
            trainable,
            ratio: if total == 0 {
                0.0
            } else {
                trainable as f64 / total as f64
            },
            breakdown,
        }
    }

    /// Counts the frozen feature table plus every tensor of `stores`,
    /// honoring each tensor's trainable flag.
    pub fn walk<T: Real>(features: &FeatureTable, stores: &[&ParamStore<T>]) -> Census {
        let mut entries = vec![CensusEntry {
            name: FEATURES.into(),
            count: features.numel(),
            trainable: false,
        }];
        for store in stores {
            entries.extend(store.iter().map(|e| CensusEntry {
                name: e.name.clone(),
                count: e.value.numel(),
                trainable: e.trainable,
            }));
        }
        Census::from_entries(entries)
    }
}

/// Sizes needed to count parameters without materializing them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensusSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    pub encoder: EncoderConfig,
    /// `(items, prefix dim)` when prompt tuning; the encoder is then frozen.
    pub prefix: Option<(usize, usize)>,
    /// Trainable downstream head parameters.
    pub head_params: usize,
}

/// Closed-form census grouped by component.
pub fn closed_form(spec: &CensusSpec) -> Census {
    let tuning = spec.prefix.is_some();
    let mut entries = vec![
        CensusEntry {
            name: FEATURES.into(),
            count: spec.n_entities * spec.encoder.d_feat,
            trainable: false,
        },
        CensusEntry {
            name: "encoder".into(),
            count: spec.encoder.param_count(spec.n_relations),
            trainable: !tuning,
        },
    ];
    if let Some((items, d_p)) = spec.prefix {
        entries.push(CensusEntry {
            name: "prefix".into(),
            count: items * d_p + d_p * spec.encoder.d_model,
            trainable: true,
        });
    }
    if spec.head_params > 0 {
        entries.push(CensusEntry {
            name: "head".into(),
            count: spec.head_params,
            trainable: true,
        });
    }
    Census::from_entries(entries)
}
