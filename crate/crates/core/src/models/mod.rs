//! The trainable models: the masked-entity reward model, the three repair
//! stages (insertion, deletion, completion), and the downstream responder.

pub mod common;
pub mod mapo;
pub mod mem;
pub mod rc;
pub mod rd;
pub mod ri;
pub mod tod;

pub use common::{ModelDims, TrainCfg, LIKELIHOOD_FLOOR};
pub use mapo::{argmax, mapo_loss, MapoState};
pub use mem::{
    mask_instances, prepare_training as prepare_mem_training, train_mem, MaskedInstance, MemModel,
    MemTrainRecord, PreparedInstance,
};
pub use rc::{
    apply_rc, build_rc_states, prepare_rc_states, rc_average_reward, rc_relation_specs,
    rc_rewards, train_rc, RcModel, RcRelationSpec, RcState, RcTrainState,
};
pub use rd::{
    apply_rd, prepare_rd_records, rd_average_reward, rd_reward, rd_rewards_for_dialog, train_rd,
    RdModel, RdRecord,
};
pub use ri::{
    apply_insertions, prepare_examples as prepare_ri_examples, score_infer_candidates, train_ri,
    RiEpochStats, RiModel,
};
pub use tod::{
    annotate_utterances, generate, prepare_tod_records, token_accuracy, train_tod, TodEpochStats,
    TodModel, TodRecord,
};
