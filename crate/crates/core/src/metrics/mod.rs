//! Sample-quality measures: Fréchet and kernel distances over classifier
//! features, the Inception-style score, conditioning accuracy and
//! per-channel intensity histograms.

mod classifier;
mod distance;
mod histogram;
mod score;

pub use classifier::{conditioning_accuracy, train_eval_classifier, Classifier, ClassifierConfig, ClassifierTraining};
pub use distance::{fid, fid_features, kid, poly_kernel, FeatureSet, GaussianStats};
pub use histogram::{channel_histograms, histogram_tsv, to_unit_range, ChannelHistogram};
pub use score::{classification_report, inception_style_score, ClassMetrics, ClassificationReport, MeanStd};
