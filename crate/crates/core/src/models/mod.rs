//! The target classifier, the self-supervised encoder with its projector
//! and predictor, the classification head, and their training loops.

mod layers;
mod nets;
mod train;

pub use layers::{LayerSpec, Params, Sequential};
pub use nets::{
    argmax_rows, classify, represent, ssl_predict, ClassHead, Classification, ClassifierNet, ModelBundle,
    SslEncoder, TrainRecord, EMBED_DIM, FEATURE_DIM,
};
pub use train::{
    classifier_accuracy, embedding_spread, ssl_probe_loss, train_class_head, train_classifier, train_ssl, Sgd,
    SslConfig, TrainConfig, COLLAPSE_STD,
};
