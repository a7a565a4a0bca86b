use std::collections::BTreeMap;

use rand::Rng;

use super::distance::FeatureSet;
use super::score::{classification_report, ClassificationReport};
use crate::data::{batch_for_step, Dataset};
use crate::diffusion::{adam_step, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::nnet::blocks::{conv, linear};
use crate::nnet::{Binder, Checkpoint, Graph, ModelParams, Tensor, Var};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub width: usize,
    pub feature_dim: usize,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    pub target_accuracy: f64,
    pub floor_accuracy: f64,
    pub adam: AdamConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            width: 16,
            feature_dim: 32,
            batch_size: 32,
            max_steps: 3000,
            eval_every: 50,
            target_accuracy: 0.99,
            floor_accuracy: 0.95,
            adam: AdamConfig {
                lr: 2e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        }
    }
}

/// Small CNN: two conv + pool stages, a dense feature layer and a linear
/// head. The feature layer's activations serve as the embedding for the
/// distribution distances.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub image_size: usize,
    pub class_names: Vec<String>,
    pub width: usize,
    pub feature_dim: usize,
    pub params: ModelParams,
    /// Accuracy on held-out real images at the chosen parameters.
    pub val_accuracy: f64,
}

const INFER_CHUNK: usize = 200;

fn he_init<R: Rng + ?Sized>(p: &mut ModelParams, path: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
    p.init_truncated_normal(format!("{path}.w"), shape, (2.0 / fan_in as f64).sqrt(), rng);
    p.init_const(format!("{path}.b"), &[*shape.last().expect("non-empty")], 0.0);
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(image_size: usize, class_names: Vec<String>, width: usize, feature_dim: usize, rng: &mut R) -> Result<Self> {
        if image_size < 4 || image_size % 4 != 0 {
            return Err(Error::invalid(format!("classifier needs image_size divisible by 4, got {image_size}")));
        }
        if class_names.len() < 2 || width == 0 || feature_dim == 0 {
            return Err(Error::invalid("classifier needs two or more classes and non-zero widths"));
        }
        let mut p = ModelParams::new();
        let flat = (image_size / 4) * (image_size / 4) * 2 * width;
        he_init(&mut p, "c1", &[3, 3, 3, width], 27, rng);
        he_init(&mut p, "c2", &[3, 3, width, 2 * width], 9 * width, rng);
        he_init(&mut p, "fc", &[flat, feature_dim], flat, rng);
        p.init_truncated_normal("head.w", &[feature_dim, class_names.len()], (1.0 / feature_dim as f64).sqrt(), rng);
        p.init_const("head.b", &[class_names.len()], 0.0);
        Ok(Self {
            image_size,
            class_names,
            width,
            feature_dim,
            params: p,
            val_accuracy: 0.0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn extractor_id(&self) -> String {
        format!("cnn-classifier-penultimate-d{}", self.feature_dim)
    }

    fn check_images(&self, x: &Tensor) -> Result<usize> {
        let (b, h, w, c) = x.nhwc()?;
        if (h, w, c) != (self.image_size, self.image_size, 3) {
            return Err(Error::shape(
                "classifier",
                format!("images are {:?}, classifier expects [B,{s},{s},3]", x.shape(), s = self.image_size),
            ));
        }
        Ok(b)
    }

    /// Returns `(features, logits)`.
    fn forward(&self, g: &mut Graph, b: &mut Binder, x: &Tensor) -> Result<(Var, Var)> {
        let mut h = g.constant(x.clone());
        h = conv(g, b, "c1", h)?;
        h = g.silu(h);
        h = g.downsample_avg(h)?;
        h = conv(g, b, "c2", h)?;
        h = g.silu(h);
        h = g.downsample_avg(h)?;
        h = g.flatten(h);
        h = linear(g, b, "fc", h)?;
        let feats = g.silu(h);
        let logits = linear(g, b, "head", feats)?;
        Ok((feats, logits))
    }

    fn infer(&self, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.check_images(x)?;
        let mut feats = Vec::with_capacity(n * self.feature_dim);
        let mut logits = Vec::with_capacity(n * self.num_classes());
        for start in (0..n).step_by(INFER_CHUNK) {
            let part = x.batch_slice(start, INFER_CHUNK.min(n - start))?;
            let mut g = Graph::inference();
            let mut b = Binder::new(&self.params);
            let (f, l) = self.forward(&mut g, &mut b, &part)?;
            feats.extend_from_slice(g.value(f).data());
            logits.extend_from_slice(g.value(l).data());
        }
        Ok((feats, logits))
    }

    pub fn features(&self, x: &Tensor) -> Result<FeatureSet> {
        let n = self.check_images(x)?;
        let (f, _) = self.infer(x)?;
        FeatureSet::new(n, self.feature_dim, f, self.extractor_id())
    }

    /// Softmax class posteriors, one row per image.
    pub fn probabilities(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (_, l) = self.infer(x)?;
        Ok(l.chunks(self.num_classes())
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            })
            .collect())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (_, l) = self.infer(x)?;
        Ok(l.chunks(self.num_classes())
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, data: &Dataset, idx: &[usize]) -> Result<f64> {
        let (x, y) = data.batch(idx)?;
        let pred = self.predict(&x)?;
        Ok(pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / idx.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self, seed: u64, step: u64) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "classifier".to_string());
        meta.insert("image_size".to_string(), self.image_size.to_string());
        meta.insert("width".to_string(), self.width.to_string());
        meta.insert("feature_dim".to_string(), self.feature_dim.to_string());
        meta.insert("val_accuracy".to_string(), format!("{}", self.val_accuracy));
        meta.insert("class_names".to_string(), self.class_names.join(","));
        Checkpoint {
            config: String::new(),
            seed,
            step,
            params: self.params.clone(),
            state: BTreeMap::new(),
            meta,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ck.meta
                .get(k)
                .ok_or_else(|| Error::invalid(format!("classifier checkpoint lacks `{k}`")))
        };
        if get("kind")? != "classifier" {
            return Err(Error::invalid("checkpoint does not hold a classifier"));
        }
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::invalid(format!("bad `{k}` in classifier checkpoint"))) };
        let class_names: Vec<String> = get("class_names")?.split(',').map(str::to_string).collect();
        let mut clf = Classifier::new(
            num("image_size")?,
            class_names,
            num("width")?,
            num("feature_dim")?,
            &mut stream(0, Purpose::Classifier, 0),
        )?;
        for (path, p) in clf.params.iter() {
            let got = ck.params.get(path)?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::invalid(format!("classifier parameter `{path}` has the wrong shape")));
            }
        }
        if ck.params.len() != clf.params.len() {
            return Err(Error::invalid("classifier checkpoint has unexpected parameters"));
        }
        clf.params = ck.params.clone();
        clf.val_accuracy = get("val_accuracy")?.parse().unwrap_or(0.0);
        Ok(clf)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierTraining {
    pub steps: u64,
    pub val_accuracy: f64,
    /// `(step, validation accuracy)` at each evaluation.
    pub history: Vec<(u64, f64)>,
}

/// Trains until the validation accuracy reaches the target or the step
/// budget runs out; keeps the best evaluated parameters. Ending below the
/// floor accuracy is an error.
pub fn train_eval_classifier(
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<(Classifier, ClassifierTraining)> {
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::invalid("classifier needs non-empty train and validation splits"));
    }
    cfg.adam.validate()?;
    let mut rng = stream(seed, Purpose::Classifier, u64::MAX);
    let mut clf = Classifier::new(data.image_size, data.class_names.clone(), cfg.width, cfg.feature_dim, &mut rng)?;
    let mut adam = AdamState::default();
    let mut best = (clf.params.clone(), -1.0, 0);
    let mut history = Vec::new();
    let mut step = 0;
    while step < cfg.max_steps {
        let idx = batch_for_step(train_idx, cfg.batch_size, seed, step);
        let (x, y) = data.batch(&idx)?;
        let mut g = Graph::new();
        let mut b = Binder::new(&clf.params);
        let (_, logits) = clf.forward(&mut g, &mut b, &x)?;
        let loss = g.softmax_cross_entropy(logits, &y)?;
        let grads = b.collect(&g.backward(loss)?);
        adam_step(&mut clf.params, &grads, &mut adam, &cfg.adam)?;
        step += 1;
        if step % cfg.eval_every.max(1) == 0 || step == cfg.max_steps {
            let acc = clf.accuracy(data, val_idx)?;
            history.push((step, acc));
            if acc > best.1 {
                best = (clf.params.clone(), acc, step);
            }
            if acc >= cfg.target_accuracy {
                break;
            }
        }
    }
    clf.params = best.0;
    clf.val_accuracy = best.1;
    if clf.val_accuracy < cfg.floor_accuracy {
        return Err(Error::Numerical(format!(
            "classifier reached only {:.4} validation accuracy (floor {}) within {} steps; history {:?}",
            clf.val_accuracy, cfg.floor_accuracy, cfg.max_steps, history
        )));
    }
    Ok((
        clf,
        ClassifierTraining {
            steps: best.2,
            val_accuracy: best.1,
            history,
        },
    ))
}

/// Classifies generated images and compares against the classes they were
/// generated for.
pub fn conditioning_accuracy(clf: &Classifier, images: &Tensor, intended: &[usize]) -> Result<ClassificationReport> {
    let predicted = clf.predict(images)?;
    classification_report(intended, &predicted, clf.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_toy_dataset, split};

    #[test]
    fn learns_toy_classes_and_round_trips() {
        let d = make_toy_dataset(60, 8, 4, 2).unwrap();
        let parts = split(&d, &[0.8, 0.2], 0).unwrap();
        let (clf, report) = train_eval_classifier(&d, &parts[0], &parts[1], &ClassifierConfig::default(), 1).unwrap();
        assert!(report.val_accuracy >= 0.99, "{report:?}");
        let (x, y) = d.batch(&parts[1]).unwrap();
        let feats = clf.features(&x).unwrap();
        assert_eq!(feats.d, 32);
        assert_eq!(clf.predict(&x).unwrap(), clf.predict(&x).unwrap());
        let r = conditioning_accuracy(&clf, &x, &y).unwrap();
        assert_eq!(r.accuracy, report.val_accuracy);
        let back = Classifier::from_checkpoint(&clf.to_checkpoint(1, report.steps)).unwrap();
        assert_eq!(back, clf);
        for row in clf.probabilities(&x).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_image_size() {
        let clf = Classifier::new(8, vec!["a".into(), "b".into()], 4, 8, &mut stream(0, Purpose::Classifier, 0)).unwrap();
        assert!(clf.predict(&Tensor::zeros(&[1, 4, 4, 3])).is_err());
        assert!(Classifier::new(6, vec!["a".into(), "b".into()], 4, 8, &mut stream(0, Purpose::Classifier, 0)).is_err());
    }
}
