use crate::layout::{check_meta, ensure_parent, meta, require, Layout};
use crate::plot::write_metric_plots;
use pseudoseg::evalkit::{read_reports_csv, run_sweep, summarize, write_reports_csv, MetricsReport, Scheme};
use pseudoseg::fuselabel::save_fused;
use pseudoseg::pipeline::{
    fuse_train_targets, generate_dataset, predict_test_3d, pseudo_probabilities, score, sparse_train_labels,
    train_pseudolabeler, train_segmenter, Dataset,
};
use pseudoseg::seg2d::{predict_volume_2d, ModelState2D};
use pseudoseg::seg3d::ModelState3D;
use pseudoseg::volgrid::{load_labels, load_probs, load_volume, save_labels, save_probs, save_volume};
use pseudoseg::{Alpha, Error, ErrorKind, ExperimentConfig, ProbVolume, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Everything a stage needs: the effective config, its hash and the layout.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub layout: Layout,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let hash = cfg.hash();
        let layout = Layout::new(&cfg.output_dir);
        Ctx { cfg, hash, layout }
    }

    fn write_config(&self) -> Result<()> {
        let path = self.layout.config();
        ensure_parent(&path)?;
        std::fs::write(&path, self.cfg.to_toml()?).map_err(|e| artifact_io(&path, e))
    }
}

fn artifact_io(path: &Path, e: std::io::Error) -> Error {
    Error::Artifact(format!("cannot write {}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("serialisable value");
    std::fs::write(path, text + "\n").map_err(|e| artifact_io(path, e))
}

fn condition(slices: usize, alpha: Option<f64>) -> Option<String> {
    Some(match alpha {
        Some(a) => format!("slices={slices} alpha={a}"),
        None => format!("slices={slices}"),
    })
}

pub fn generate(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    ctx.write_config()?;
    let ds = generate_dataset(&ctx.cfg)?;
    let names = Layout::phantom_names(ds.train.len());
    let phantoms = ctx.cfg.train_phantoms.iter().chain([&ctx.cfg.test_phantom]);
    let pairs = ds.train.iter().chain([&ds.test]);
    let mut written = Vec::new();
    for ((name, p), (v, l)) in names.iter().zip(phantoms).zip(pairs) {
        let m = meta(&ctx.hash, "generate", p.seed, None);
        let (vp, lp) = (ctx.layout.volume(name), ctx.layout.labels(name));
        ensure_parent(&vp)?;
        save_volume(&v.clone().with_meta(m.clone()), &vp)?;
        save_labels(&l.clone().with_meta(m), &lp)?;
        written.extend([vp, lp]);
    }
    Ok(written)
}

fn load_dataset(ctx: &Ctx) -> Result<Dataset> {
    let names = Layout::phantom_names(ctx.cfg.train_phantoms.len());
    let mut pairs = Vec::new();
    for name in &names {
        let (vp, lp) = (ctx.layout.volume(name), ctx.layout.labels(name));
        require(&vp)?;
        require(&lp)?;
        let v = load_volume(&vp)?;
        check_meta(v.meta(), &ctx.hash, &vp)?;
        let l = load_labels(&lp)?;
        check_meta(l.meta(), &ctx.hash, &lp)?;
        pairs.push((v, l));
    }
    let test = pairs.pop().unwrap();
    Ok(Dataset { train: pairs, test })
}

pub fn train2d(ctx: &Ctx, slices: usize, seed: u64) -> Result<PathBuf> {
    let ds = load_dataset(ctx)?;
    let sparse = sparse_train_labels(&ds, slices)?;
    let (model, history) = train_pseudolabeler(&ctx.cfg, &ds, &sparse, seed)?;
    let path = ctx.layout.seg2d(slices, seed);
    ensure_parent(&path)?;
    model.save(&path, Some(meta(&ctx.hash, "train2d", seed, condition(slices, None))))?;
    write_json(&path.with_file_name("seg2d_history.json"), &history)?;
    Ok(path)
}

fn load_seg2d(ctx: &Ctx, slices: usize, seed: u64) -> Result<ModelState2D> {
    let path = ctx.layout.seg2d(slices, seed);
    require(&path)?;
    let (model, m) = ModelState2D::load(&path)?;
    check_meta(m.as_ref(), &ctx.hash, &path)?;
    Ok(model)
}

pub fn pseudolabel(ctx: &Ctx, slices: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let ds = load_dataset(ctx)?;
    let model = load_seg2d(ctx, slices, seed)?;
    let mut written = Vec::new();
    for (i, p) in pseudo_probabilities(&model, &ds)?.into_iter().enumerate() {
        let path = ctx.layout.pseudo(slices, seed, i);
        ensure_parent(&path)?;
        save_probs(&p.with_meta(meta(&ctx.hash, "pseudolabel", seed, condition(slices, None))), &path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn train3d(ctx: &Ctx, slices: usize, seed: u64, alpha: f64) -> Result<PathBuf> {
    let alpha_v = Alpha::new(alpha).map_err(|e| Error::Config(e.to_string()))?;
    let ds = load_dataset(ctx)?;
    let sparse = sparse_train_labels(&ds, slices)?;
    let mut probs: Vec<ProbVolume> = Vec::new();
    for i in 0..ds.train.len() {
        let path = ctx.layout.pseudo(slices, seed, i);
        require(&path)?;
        let p = load_probs(&path)?;
        check_meta(p.meta(), &ctx.hash, &path)?;
        probs.push(p);
    }
    let fused = fuse_train_targets(&ctx.cfg, &sparse, &probs, alpha_v)?;
    let dir = ctx.layout.alpha_dir(slices, seed, alpha);
    std::fs::create_dir_all(&dir).map_err(|e| artifact_io(&dir, e))?;
    for (i, f) in fused.iter().enumerate() {
        let m = meta(&ctx.hash, "fuse", seed, condition(slices, Some(alpha)));
        save_fused(f, &dir, &format!("train{i}"), Some(m))?;
    }
    let (model, history) = train_segmenter(&ctx.cfg, &ds, &fused, seed)?;
    let path = ctx.layout.seg3d(slices, seed, alpha);
    model.save(&path, Some(meta(&ctx.hash, "train3d", seed, condition(slices, Some(alpha)))))?;
    write_json(&dir.join("seg3d_history.json"), &history)?;
    Ok(path)
}

/// Scores every trained model of one condition on the test volume. With
/// `alpha` set only that 3D run is scored (plus the 2D model).
pub fn eval(ctx: &Ctx, slices: usize, seed: u64, alpha: Option<f64>) -> Result<(PathBuf, Vec<MetricsReport>)> {
    let ds = load_dataset(ctx)?;
    let (v, gt) = &ds.test;
    let mut reports = Vec::new();
    if ctx.layout.seg2d(slices, seed).exists() {
        let model = load_seg2d(ctx, slices, seed)?;
        let p = predict_volume_2d(&model, v)?;
        reports.push(score(&ctx.cfg, &p, gt, Scheme::Seg2d, slices, None, seed)?);
    }
    let alphas = match alpha {
        Some(a) => vec![a],
        None => std::iter::once(0.0).chain(ctx.cfg.sweep.alphas.iter().copied().filter(|&a| a > 0.0)).collect(),
    };
    for a in alphas {
        let path = ctx.layout.seg3d(slices, seed, a);
        if !path.exists() {
            if alpha.is_some() {
                require(&path)?;
            }
            continue;
        }
        let (model, m) = ModelState3D::load(&path)?;
        check_meta(m.as_ref(), &ctx.hash, &path)?;
        let p = predict_test_3d(&ctx.cfg, &model, v)?;
        let scheme = if a == 0.0 { Scheme::Seg3dSparse } else { Scheme::Seg3dPseudo };
        reports.push(score(&ctx.cfg, &p, gt, scheme, slices, Some(a), seed)?);
    }
    if reports.is_empty() {
        return Err(Error::Artifact(format!(
            "no trained models under {}",
            ctx.layout.condition(slices, seed).display()
        )));
    }
    let path = ctx.layout.condition(slices, seed).join("metrics.csv");
    write_csv(&path, &reports)?;
    Ok((path, reports))
}

fn write_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    ensure_parent(path)?;
    let file = std::fs::File::create(path).map_err(|e| artifact_io(path, e))?;
    write_reports_csv(std::io::BufWriter::new(file), reports)
}

/// Writes the summary table and one plot per metric from a report list.
fn emit_report(ctx: &Ctx, reports: &[MetricsReport]) -> Result<Vec<PathBuf>> {
    let rows = summarize(reports);
    let summary = ctx.layout.file("summary.json");
    write_json(&summary, &rows)?;
    let mut written = vec![summary];
    written.extend(write_metric_plots(&ctx.layout.root, reports)?);
    Ok(written)
}

pub struct SweepResult {
    pub written: Vec<PathBuf>,
    pub failures: usize,
    /// Kind of the first failure, if any.
    pub worst: Option<ErrorKind>,
}

pub fn sweep(ctx: &Ctx) -> Result<SweepResult> {
    ctx.write_config()?;
    let out = run_sweep(&ctx.cfg)?;
    let csv = ctx.layout.file("results.csv");
    write_csv(&csv, &out.reports)?;
    let mut written = vec![csv];
    let failures = ctx.layout.file("failures.json");
    write_json(&failures, &out.failures)?;
    let histories = ctx.layout.file("histories.json");
    write_json(&histories, &out.histories)?;
    written.extend([failures, histories]);
    written.extend(emit_report(ctx, &out.reports)?);
    Ok(SweepResult { written, failures: out.failures.len(), worst: out.failures.first().map(|f| f.kind) })
}

/// Rebuilds summary and plots from an existing results CSV.
pub fn report(ctx: &Ctx, csv: Option<&Path>) -> Result<(Vec<PathBuf>, Vec<MetricsReport>)> {
    let path = csv.map(Path::to_path_buf).unwrap_or_else(|| ctx.layout.file("results.csv"));
    require(&path)?;
    let file = std::fs::File::open(&path).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
    let reports = read_reports_csv(std::io::BufReader::new(file))?;
    Ok((emit_report(ctx, &reports)?, reports))
}
