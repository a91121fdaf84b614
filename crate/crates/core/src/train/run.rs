use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ClassWeighting, Experiment, TrainConfig};
use super::data::{cascade_predictions, load_network, CascadeAux, PreparedSplit, INFER_BATCH};
use super::optim::{adadelta_step, AdadeltaParams, AdadeltaState};
use crate::error::{Error, Result};
use crate::losses::{self, median_frequency_weights, ClassWeightVector, JointTargets};
use crate::metrics::{evaluate, parse_kv, EvalReport, ImagePrediction};
use crate::nn::{
    bind_params, forward, save_checkpoint, Graph, Head, InputSource, Mode, Network, NetworkSpec, NetworkState,
    ParamGroup,
};
use crate::scenegen::{Dataset, Split};

pub const CHECKPOINT_FILE: &str = "model.isnn";
pub const CONFIG_FILE: &str = "config.txt";
pub const RUN_TEXT_FILE: &str = "run.txt";
pub const RUN_KV_FILE: &str = "run.kv";
pub const EVAL_TEXT_FILE: &str = "eval.txt";
pub const EVAL_KV_FILE: &str = "eval.kv";
pub const CONFUSION_FILE: &str = "confusion.csv";

/// Which parameter groups receive updates (and running-statistic updates).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trainable {
    pub heads: Vec<Head>,
    pub encoder: bool,
}

impl Trainable {
    pub fn all(spec: &NetworkSpec) -> Self {
        Self {
            heads: spec.heads.clone(),
            encoder: true,
        }
    }

    pub fn group(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Head(h) => self.heads.contains(&h),
        }
    }

    pub fn any(&self) -> bool {
        self.encoder || !self.heads.is_empty()
    }
}

/// Restricts updates to the named decoders, plus the encoder when `encoder` is set.
pub fn set_trainable(spec: &NetworkSpec, heads: &[Head], encoder: bool) -> Result<Trainable> {
    for h in heads {
        if !spec.has(*h) {
            return Err(Error::Config(format!("network has no {} head", h.name())));
        }
    }
    let mut heads = heads.to_vec();
    heads.sort();
    heads.dedup();
    Ok(Trainable { heads, encoder })
}

/// Training-set means of the loss terms over one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub batches: usize,
    /// `ce_term + intrinsic_term`.
    pub total: f64,
    /// Weighted cross-entropy contribution (zero without a segmentation head).
    pub ce_term: f64,
    /// Weighted intrinsic contribution (zero without intrinsic heads).
    pub intrinsic_term: f64,
    pub cross_entropy: f64,
    pub intrinsic: f64,
    /// Largest `|total − (ce_term + intrinsic_term)|` seen on any batch.
    pub breakdown_residual: f64,
    /// Test-split aggregates, when per-epoch evaluation is on.
    pub eval: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub experiment: Experiment,
    pub config_text: String,
    pub config_hash: u64,
    pub param_count: usize,
    pub class_names: Vec<String>,
    pub trace: Vec<EpochStats>,
    pub eval: EvalReport,
    /// Checkpoint file name, relative to the run directory.
    pub checkpoint: String,
}

impl RunRecord {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment={}", self.experiment.name());
        let _ = writeln!(s, "config_hash={:016x}", self.config_hash);
        let _ = writeln!(s, "param_count={}", self.param_count);
        let _ = writeln!(s, "checkpoint={}", self.checkpoint);
        let _ = writeln!(s, "class_names={}", self.class_names.join(","));
        let _ = writeln!(s, "epochs={}", self.trace.len());
        for e in &self.trace {
            let i = e.epoch;
            let _ = writeln!(s, "trace.{i}.total={:?}", e.total);
            let _ = writeln!(s, "trace.{i}.ce_term={:?}", e.ce_term);
            let _ = writeln!(s, "trace.{i}.intrinsic_term={:?}", e.intrinsic_term);
            let _ = writeln!(s, "trace.{i}.cross_entropy={:?}", e.cross_entropy);
            let _ = writeln!(s, "trace.{i}.intrinsic={:?}", e.intrinsic);
            let _ = writeln!(s, "trace.{i}.batches={}", e.batches);
            let _ = writeln!(s, "trace.{i}.breakdown_residual={:?}", e.breakdown_residual);
            if let Some(ev) = &e.eval {
                for (k, v) in ev {
                    let _ = writeln!(s, "trace.{i}.eval.{k}={v}");
                }
            }
        }
        for (k, v) in self.eval.aggregates() {
            let _ = writeln!(s, "eval.{k}={v}");
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment {}  config {:016x}  parameters {}", self.experiment.name(), self.config_hash, self.param_count);
        let _ = writeln!(s, "epoch        total      ce_term  intrinsic_term");
        for e in &self.trace {
            let _ = writeln!(s, "{:>5} {:>12.6} {:>12.6} {:>15.6}", e.epoch + 1, e.total, e.ce_term, e.intrinsic_term);
        }
        s.push('\n');
        s.push_str(&self.eval.to_text());
        s
    }
}

/// Loss traces and evaluation values read back from a run directory's `run.kv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub experiment: String,
    pub class_names: Vec<String>,
    pub totals: Vec<f64>,
    pub ce_terms: Vec<f64>,
    pub intrinsic_terms: Vec<f64>,
    /// `eval.*` keys with the prefix stripped.
    pub eval: BTreeMap<String, String>,
}

impl RunSummary {
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| Error::Format(format!("run record lacks {k}")));
        let epochs: usize = get("epochs")?
            .parse()
            .map_err(|_| Error::Format("run record: bad epochs".into()))?;
        let series = |term: &str| -> Result<Vec<f64>> {
            (0..epochs)
                .map(|i| {
                    get(&format!("trace.{i}.{term}"))?
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("run record: bad trace.{i}.{term}")))
                })
                .collect()
        };
        let names = get("class_names")?;
        Ok(Self {
            name: name.to_string(),
            experiment: get("experiment")?,
            class_names: if names.is_empty() { Vec::new() } else { names.split(',').map(str::to_string).collect() },
            totals: series("total")?,
            ce_terms: series("ce_term")?,
            intrinsic_terms: series("intrinsic_term")?,
            eval: kv
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("eval.").map(|k| (k.to_string(), v.clone())))
                .collect(),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Self::parse(&name, &fs::read_to_string(dir.join(RUN_KV_FILE))?)
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.eval.get(key).and_then(|v| v.parse().ok())
    }
}

fn class_weights(cfg: &TrainConfig, dataset: &Dataset) -> Result<ClassWeightVector> {
    match cfg.class_weighting {
        ClassWeighting::Uniform => Ok(ClassWeightVector::uniform(dataset.manifest.num_classes)),
        ClassWeighting::MedianFrequency => median_frequency_weights(&dataset.manifest.train_class_frequencies()),
    }
}

fn load_prepared(dataset: &Dataset, split: Split, source: InputSource, cascade: Option<&Network>) -> Result<PreparedSplit> {
    let ids: Vec<usize> = dataset.manifest.entries(split).map(|e| e.sample_id as usize).collect();
    let samples = dataset.load_split(split)?;
    if samples.is_empty() {
        return Err(Error::Dataset(format!("the {} split is empty", split.as_str())));
    }
    let aux: Option<CascadeAux> = cascade.map(|n| cascade_predictions(n, &samples, source)).transpose()?;
    PreparedSplit::new(ids, samples, source, aux.as_ref())
}

/// Checks the network can consume this dataset.
pub fn check_compatible(spec: &NetworkSpec, dataset: &Dataset) -> Result<()> {
    let m = &dataset.manifest;
    if spec.num_classes != m.num_classes {
        return Err(Error::Dataset(format!(
            "network predicts {} classes, dataset has {}",
            spec.num_classes, m.num_classes
        )));
    }
    spec.check_resolution(m.height, m.width)
        .map_err(|e| Error::Dataset(format!("{}x{} images: {e}", m.height, m.width)))
}

/// Evaluation-mode predictions over a prepared split, scored against its ground truth.
pub fn evaluate_network(net: &Network, data: &PreparedSplit, class_names: &[String]) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(INFER_BATCH) {
        let p = net.predict(&data.batch_inputs(chunk)?)?;
        for (k, &i) in chunk.iter().enumerate() {
            let plane = data.samples[i].labels.height() * data.samples[i].labels.width();
            preds.push(ImagePrediction {
                reflectance: p.reflectance.as_ref().map(|t| t.index0(k)),
                shading: p.shading.as_ref().map(|t| t.index0(k)),
                labels: p.labels.as_ref().map(|l| l[k * plane..(k + 1) * plane].to_vec()),
            });
        }
    }
    let items: Vec<_> = preds
        .into_iter()
        .enumerate()
        .map(|(i, p)| (data.ids[i], p, &data.samples[i]))
        .collect();
    evaluate(&items, class_names)
}

/// Evaluates a trained network on one split; cascade inputs come from
/// `cascade_source` when given, otherwise from ground truth.
pub fn evaluate_checkpoint(net: &Network, dataset: &Dataset, split: Split, cascade_source: Option<&Path>) -> Result<EvalReport> {
    check_compatible(&net.spec, dataset)?;
    let cascade = cascade_source.map(load_network).transpose()?;
    let data = load_prepared(dataset, split, net.spec.input_source, cascade.as_ref())?;
    evaluate_network(net, &data, &dataset.manifest.class_names)
}

/// Scores ground truth against itself: the perfect-predictor reference.
pub fn evaluate_oracle(dataset: &Dataset, split: Split) -> Result<EvalReport> {
    let ids: Vec<usize> = dataset.manifest.entries(split).map(|e| e.sample_id as usize).collect();
    let samples = dataset.load_split(split)?;
    let items: Vec<_> = samples
        .iter()
        .zip(ids)
        .map(|(s, id)| (id, ImagePrediction::oracle(s), s))
        .collect();
    evaluate(&items, &dataset.manifest.class_names)
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    trainable: Trainable,
    weights: ClassWeightVector,
    opt: Vec<AdadeltaState>,
    hyper: AdadeltaParams,
}

struct BatchLoss {
    total: f64,
    ce_term: f64,
    intrinsic_term: f64,
    cross_entropy: f64,
    intrinsic: f64,
}

impl Trainer<'_> {
    fn step(&mut self, net: &mut Network, data: &PreparedSplit, idx: &[usize]) -> Result<BatchLoss> {
        let cfg = self.cfg;
        let mut g = Graph::new();
        let trainable = &self.trainable;
        let params = bind_params(&mut g, &net.state, |p| trainable.group(p.group));
        let x = g.constant(data.batch_inputs(idx)?);
        let out = forward(&mut g, &net.spec, &net.state, &params, x, Mode::Train)?;

        let intrinsic_targets = |g: &mut Graph| -> Result<_> {
            let r = g.constant(data.batch_reflectance(idx)?);
            let s = g.constant(data.batch_shading(idx)?);
            Ok((r, s))
        };
        let labels = data.batch_labels(idx);
        let (loss_var, loss) = match cfg.experiment {
            Experiment::SingleIntrinsics | Experiment::CascadeSegToIntrinsics => {
                let (rt, st) = intrinsic_targets(&mut g)?;
                let (r, s) = (out.reflectance.expect("head"), out.shading.expect("head"));
                let il = losses::intrinsic_loss(&mut g, r, rt, s, st, &cfg.loss, cfg.alpha_mode)?;
                let v = g.value(il).item();
                (il, BatchLoss { total: v, ce_term: 0.0, intrinsic_term: v, cross_entropy: 0.0, intrinsic: v })
            }
            Experiment::SingleSegmentation | Experiment::CascadeAlbedoToSeg => {
                let logits = out.segmentation.expect("head");
                let ce = losses::cross_entropy(&mut g, logits, &labels, &self.weights)?;
                let v = g.value(ce).item();
                (ce, BatchLoss { total: v, ce_term: v, intrinsic_term: 0.0, cross_entropy: v, intrinsic: 0.0 })
            }
            Experiment::Joint => {
                let (rt, st) = intrinsic_targets(&mut g)?;
                let t = JointTargets {
                    labels: &labels,
                    class_weights: &self.weights,
                    reflectance: rt,
                    shading: st,
                };
                let jl = losses::joint_loss(
                    &mut g,
                    out.segmentation.expect("head"),
                    out.reflectance.expect("head"),
                    out.shading.expect("head"),
                    &t,
                    &cfg.loss,
                    cfg.alpha_mode,
                )?;
                let total = g.value(jl.total).item();
                (
                    jl.total,
                    BatchLoss {
                        total,
                        ce_term: jl.ce_term,
                        intrinsic_term: jl.intrinsic_term,
                        cross_entropy: jl.cross_entropy,
                        intrinsic: jl.intrinsic,
                    },
                )
            }
        };
        if !loss.total.is_finite() {
            return Err(Error::Degenerate(format!("non-finite training loss {}", loss.total)));
        }

        let stats = out.stats;
        let vars = params.vars().to_vec();
        let mut grads = g.backward(loss_var)?;
        for (i, var) in vars.into_iter().enumerate() {
            let Some(grad) = grads.take(var) else { continue };
            let p = &mut net.state.params_mut()[i];
            let mut theta: Vec<f64> = p.data.iter().map(|&v| v as f64).collect();
            let st = &mut self.opt[i];
            if st.sq_grad.len() != theta.len() {
                *st = AdadeltaState::new(theta.len());
            }
            adadelta_step(&mut theta, grad.data(), st, &self.hyper)?;
            for (d, t) in p.data.iter_mut().zip(theta) {
                *d = t as f32;
            }
        }
        net.state.update_running_stats(&stats, |grp| !trainable.group(grp));
        Ok(loss)
    }
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

/// A trained network and its record, before anything is written to disk.
pub struct TrainedRun {
    pub network: Network,
    pub record: RunRecord,
}

/// Trains and evaluates without touching the filesystem (apart from reading
/// the dataset and any configured checkpoints).
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainedRun> {
    train_with(cfg, dataset, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(cfg: &TrainConfig, dataset: &Dataset, mut on_epoch: impl FnMut(&EpochStats)) -> Result<TrainedRun> {
    cfg.validate()?;
    let m = &dataset.manifest;
    if let Some((h, w)) = cfg.resolution {
        if (h, w) != (m.height, m.width) {
            return Err(Error::Dataset(format!(
                "config expects {h}x{w} inputs, dataset has {}x{}",
                m.height, m.width
            )));
        }
    }
    let spec = cfg.network_spec(m.num_classes);
    check_compatible(&spec, dataset)?;
    let mut net = match &cfg.init_checkpoint {
        Some(path) => {
            let n = load_network(path)?;
            if n.spec != spec {
                return Err(Error::Checkpoint(format!(
                    "{} was trained with a different network spec",
                    path.display()
                )));
            }
            n
        }
        None => Network {
            state: NetworkState::init(&spec, cfg.seed)?,
            spec: spec.clone(),
        },
    };
    let trainable = match &cfg.trainable_heads {
        None => Trainable { heads: spec.heads.clone(), encoder: cfg.train_encoder },
        Some(h) => set_trainable(&spec, h, cfg.train_encoder)?,
    };

    let cascade = cfg.cascade_source.as_deref().map(load_network).transpose()?;
    let mut train_data = load_prepared(dataset, Split::Train, spec.input_source, cascade.as_ref())?;
    if cfg.train_limit > 0 {
        train_data.truncate(cfg.train_limit);
    }
    if train_data.len() < 2 {
        return Err(Error::Dataset("training needs at least two samples".into()));
    }
    let test_data = load_prepared(dataset, Split::Test, spec.input_source, cascade.as_ref())?;

    let mut trainer = Trainer {
        cfg,
        trainable,
        weights: class_weights(cfg, dataset)?,
        opt: vec![AdadeltaState::default(); net.state.params().len()],
        hyper: AdadeltaParams {
            lr: cfg.lr,
            rho: cfg.rho,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        },
    };

    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train_data.len());
        let (mut sums, mut batches, mut residual) = ([0.0f64; 4], 0usize, 0.0f64);
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let l = trainer.step(&mut net, &train_data, idx)?;
            residual = residual.max((l.total - (l.ce_term + l.intrinsic_term)).abs());
            for (s, v) in sums.iter_mut().zip([l.ce_term, l.intrinsic_term, l.cross_entropy, l.intrinsic]) {
                *s += v;
            }
            batches += 1;
        }
        let [ce_term, intrinsic_term, cross_entropy, intrinsic] = sums.map(|s| s / batches as f64);
        let eval = if cfg.eval_every_epoch {
            Some(evaluate_network(&net, &test_data, &m.class_names)?.aggregates())
        } else {
            None
        };
        trace.push(EpochStats {
            epoch,
            batches,
            total: ce_term + intrinsic_term,
            ce_term,
            intrinsic_term,
            cross_entropy,
            intrinsic,
            breakdown_residual: residual,
            eval,
        });
        on_epoch(trace.last().expect("just pushed"));
    }
    if !net.state.all_finite() {
        return Err(Error::Degenerate("training produced non-finite parameters".into()));
    }

    let eval = evaluate_network(&net, &test_data, &m.class_names)?;
    let record = RunRecord {
        experiment: cfg.experiment,
        config_text: cfg.to_text(),
        config_hash: cfg.hash(),
        param_count: spec.param_count(),
        class_names: m.class_names.clone(),
        trace,
        eval,
        checkpoint: CHECKPOINT_FILE.to_string(),
    };
    Ok(TrainedRun { network: net, record })
}

/// Writes the checkpoint, config, run record and evaluation files into `out_dir`.
pub fn write_run(out_dir: &Path, run: &TrainedRun) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let r = &run.record;
    save_checkpoint(&out_dir.join(&r.checkpoint), &run.network)?;
    fs::write(out_dir.join(CONFIG_FILE), &r.config_text)?;
    write_eval(out_dir, &r.eval)?;
    fs::write(out_dir.join(RUN_TEXT_FILE), r.to_text())?;
    // written last: its presence marks a complete run
    fs::write(out_dir.join(RUN_KV_FILE), r.to_kv())?;
    Ok(())
}

pub fn write_eval(out_dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(EVAL_TEXT_FILE), report.to_text())?;
    fs::write(out_dir.join(EVAL_KV_FILE), report.to_kv())?;
    if let Some(seg) = &report.segmentation {
        fs::write(out_dir.join(CONFUSION_FILE), seg.confusion.to_csv(&report.class_names))?;
    }
    Ok(())
}

/// Trains, evaluates on the test split and writes every run artifact to `out_dir`.
pub fn run_experiment(cfg: &TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<RunRecord> {
    let run = train(cfg, dataset)?;
    write_run(out_dir, &run)?;
    Ok(run.record)
}

/// The sweep's intrinsic-loss multipliers.
pub const SWEEP_W: [f64; 5] = [0.01, 0.5, 1.0, 2.0, 4.0];

/// One `joint` run per `w`, each in `out_dir/w_<value>`.
pub fn sweep_w(values: &[f64], base: &TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<Vec<(f64, RunRecord)>> {
    let mut rows = Vec::with_capacity(values.len());
    for &w in values {
        let mut cfg = base.clone();
        cfg.experiment = Experiment::Joint;
        cfg.loss.w = w;
        let rec = run_experiment(&cfg, dataset, &out_dir.join(format!("w_{w}")))?;
        rows.push((w, rec));
    }
    fs::write(out_dir.join("sweep.txt"), crate::report::sweep_table(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_orders_are_permutations_and_vary() {
        let a = epoch_order(3, 0, 10);
        let b = epoch_order(3, 1, 10);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(3, 0, 10));
    }

    #[test]
    fn set_trainable_rejects_missing_heads() {
        let spec = NetworkSpec::new(&[Head::Segmentation], 4);
        assert!(set_trainable(&spec, &[Head::Reflectance], true).is_err());
        let t = set_trainable(&spec, &[Head::Segmentation], false).unwrap();
        assert!(t.group(ParamGroup::Head(Head::Segmentation)));
        assert!(!t.group(ParamGroup::Encoder));
    }
}
