//! Tabular preference-optimization lab: contextual bandit instances, a
//! linear-softmax policy, preference losses, an Adam training loop, and the
//! interpolation, preservation and degeneracy experiments built on them.

pub mod datagen;
pub mod error;
pub mod experiments;
pub mod instance;
pub mod losses;
pub mod optim;
pub mod oracle;
pub mod par;
pub mod policy;

pub use datagen::{PairMode, PreferenceDataset, PreferenceTuple};
pub use error::{Error, Result};
pub use instance::{BanditInstance, Prompt};
pub use losses::{make_loss_spec, EvaluationMode, LossKind, LossSpec};
pub use par::Execution;
pub use policy::PolicyModel;
