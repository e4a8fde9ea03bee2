//! Adversarial example generation: FGSM, PGD (L-inf and L2), the
//! score-based Square attack, a universal patch, and pool generation.

pub mod gradient;
pub mod patch;
pub mod pool;
pub mod record;
pub mod square;
pub mod taxonomy;

pub use gradient::{fgsm, pgd, PgdParams};
pub use patch::{patch_apply, patch_attack_train, PatchConfig, TrainedPatch};
pub use pool::{generate_classes, generate_pool, AttackConfig, Pool, PoolSummary};
pub use record::{AdversarialRecord, RecordMeta};
pub use square::{square_attack, QueryCounter, ScoreOracle, SquareParams};
pub use taxonomy::{Algorithm, AttackClass, EpsGrids, Norm, Taxonomy};
