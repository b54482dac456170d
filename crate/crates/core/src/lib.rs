//! Joint facial action unit detection and face alignment.
//!
//! The crate provides a small dense-tensor autodiff engine ([`graph`]), the layers built on it
//! (plain and patch-wise convolutions, hierarchical multi-scale region blocks, landmark-seeded
//! attention with refinement), the joint network ([`network`]), its losses, staged SGD training,
//! evaluation metrics, and data ingestion including a synthetic face generator.
//!
//! ```no_run
//! use aualign::{NetConfig, Network};
//! use aualign::dataio::synth::{synth_dataset, SynthConfig};
//! use aualign::training::{run_schedule, FlipTable, TrainSchedule};
//!
//! let data = synth_dataset(&SynthConfig::default())?.dataset;
//! let mut net = Network::build(NetConfig::toy())?;
//! let report = run_schedule(&mut net, &data, &TrainSchedule::toy(), &FlipTable::toy(), |_, _| Ok(()))?;
//! print!("{}", report.log_text());
//! # Ok::<(), aualign::Error>(())
//! ```

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod params;
pub mod region;
pub mod tensor;
pub mod training;

pub use attention::{AttentionMap, LandmarkSet, RuleTable};
pub use config::RunConfig;
pub use dataio::{Dataset, Manifest, SampleRecord};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use losses::AuWeights;
pub use metrics::{FoldSplit, LabelMatrix};
pub use network::{ForwardOutput, LossValues, NetConfig, Network, Targets};
pub use params::{Gradients, Module, ParamStore};
pub use region::RegionKind;
pub use tensor::{ConvSpec, Tensor};
pub use training::{FlipTable, TrainSchedule};
