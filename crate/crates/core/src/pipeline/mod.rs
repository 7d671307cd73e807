//! Training, checkpointing, embedding extraction and the two evaluation tasks.

pub mod checkpoint;
pub mod config;
pub mod tasks;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use tasks::{
    center_crop, classify_embeddings, embed_features, extract_embeddings, read_embeddings, run_task1, run_task2,
    run_task2_with_checkpoint, score_trials, write_embeddings, EmbeddingTable, Task1Report, Task2Report,
};
pub use train::{random_crop, train, train_with_pools, EpochLog, TrainOutcome};
