//! Contrastive evaluator, the metric battery, the throughput benchmark and
//! the compressor ablation table.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use mvq_tensor::{Adam, Graph, ParamStore, Tensor, Var};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::conditioner::CompressorKind;
use crate::data::{FeatureSequence, MotionSequence, FEATURE_DIM, MOTION_DIM};
use crate::nn::{Conv1d, Linear};
use crate::rvq::{to_canonical, Normalizer};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub temperature: f64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 64,
            temperature: 0.07,
        }
    }
}

/// Motion and condition encoders into a shared unit-norm embedding space.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub config: EvaluatorConfig,
    pub params: ParamStore,
    pub normalizer: Normalizer,
    motion_convs: Vec<Conv1d>,
    motion_proj: Linear,
    cond_layers: Vec<Linear>,
    cond_proj: Linear,
}

impl Evaluator {
    pub fn new(config: EvaluatorConfig, rng: &mut impl Rng) -> Self {
        let mut ps = ParamStore::new();
        let h = config.hidden;
        let motion_convs = vec![
            Conv1d::same(&mut ps, "motion.conv0", MOTION_DIM, h, rng),
            Conv1d::new(&mut ps, "motion.conv1", h, h, 4, 2, (1, 1), rng),
            Conv1d::new(&mut ps, "motion.conv2", h, h, 4, 2, (1, 1), rng),
        ];
        let motion_proj = Linear::new(&mut ps, "motion.proj", h, config.embed_dim, rng);
        let cond_layers = vec![
            Linear::new(&mut ps, "cond.fc0", FEATURE_DIM, h, rng),
            Linear::new(&mut ps, "cond.fc1", h, h, rng),
        ];
        let cond_proj = Linear::new(&mut ps, "cond.proj", h, config.embed_dim, rng);
        Self {
            config,
            params: ps,
            normalizer: Normalizer::default(),
            motion_convs,
            motion_proj,
            cond_layers,
            cond_proj,
        }
    }

    fn motion_graph(&self, g: &mut Graph<'_>, motions: &[&MotionSequence]) -> Result<Var> {
        let mut rows = Vec::with_capacity(motions.len());
        for m in motions {
            if m.len() < 4 {
                return Err(Error::InputTooShort { len: m.len(), min: 4 });
            }
            let mut frames = to_canonical(m);
            self.normalizer.normalize(&mut frames);
            let mut h = g.constant(Tensor::new(vec![1, m.len(), MOTION_DIM], frames)?);
            for conv in &self.motion_convs {
                h = conv.forward(g, h)?;
                h = g.relu(h);
            }
            rows.push(g.mean_axis(h, 1)?);
        }
        let h = g.concat(&rows, 0)?;
        let e = self.motion_proj.forward(g, h)?;
        Ok(g.l2_normalize(e))
    }

    fn cond_graph(&self, g: &mut Graph<'_>, feats: &[&FeatureSequence]) -> Result<Var> {
        let total: usize = feats.iter().map(|f| f.len()).sum();
        if feats.iter().any(|f| f.is_empty()) {
            return Err(Error::EmptyInput("feature sequence with T = 0"));
        }
        let mut stacked = Vec::with_capacity(total * FEATURE_DIM);
        let mut pool = vec![0.0; feats.len() * total];
        let mut offset = 0;
        for (b, f) in feats.iter().enumerate() {
            stacked.extend_from_slice(&f.frames);
            for t in 0..f.len() {
                pool[b * total + offset + t] = 1.0 / f.len() as f64;
            }
            offset += f.len();
        }
        let mut h = g.constant(Tensor::new(vec![total, FEATURE_DIM], stacked)?);
        for layer in &self.cond_layers {
            h = layer.forward(g, h)?;
            h = g.relu(h);
        }
        let pool = g.constant(Tensor::new(vec![feats.len(), total], pool)?);
        let h = g.matmul(pool, h)?;
        let e = self.cond_proj.forward(g, h)?;
        Ok(g.l2_normalize(e))
    }

    pub fn motion_features(&self, motions: &[&MotionSequence]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::with_params(&self.params);
        let e = self.motion_graph(&mut g, motions)?;
        Ok(rows(g.value(e)))
    }

    pub fn condition_features(&self, feats: &[&FeatureSequence]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::with_params(&self.params);
        let e = self.cond_graph(&mut g, feats)?;
        Ok(rows(g.value(e)))
    }

    /// Symmetric InfoNCE over the batch's cosine similarities.
    pub fn train_step(&mut self, batch: &[(&FeatureSequence, &MotionSequence)], opt: &mut Adam) -> Result<f64> {
        let feats: Vec<&FeatureSequence> = batch.iter().map(|b| b.0).collect();
        let motions: Vec<&MotionSequence> = batch.iter().map(|b| b.1).collect();
        let (value, grads) = {
            let mut g = Graph::with_params(&self.params);
            let m = self.motion_graph(&mut g, &motions)?;
            let c = self.cond_graph(&mut g, &feats)?;
            let inv_t = 1.0 / self.config.temperature;
            let ct = g.permute(c, &[1, 0])?;
            let mt = g.permute(m, &[1, 0])?;
            let mc = g.matmul(m, ct)?;
            let mc = g.scale(mc, inv_t);
            let cm = g.matmul(c, mt)?;
            let cm = g.scale(cm, inv_t);
            let targets: Vec<Option<usize>> = (0..batch.len()).map(Some).collect();
            let l1 = g.cross_entropy(mc, &targets)?;
            let l2 = g.cross_entropy(cm, &targets)?;
            let loss = g.add(l1, l2)?;
            let loss = g.scale(loss, 0.5);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step: opt.step_count(),
                    detail: format!("evaluator loss {value}"),
                });
            }
            (value, g.backward(loss)?.param_grads(&self.params))
        };
        opt.step(&mut self.params, &grads)?;
        Ok(value)
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = *t.shape().last().unwrap();
    t.data().chunks_exact(w).map(<[f64]>::to_vec).collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn moments(feats: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = feats.len();
    let e = feats[0].len();
    let mut mu = DVector::zeros(e);
    for f in feats {
        mu += DVector::from_column_slice(f);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(e, e);
    for f in feats {
        let d = DVector::from_column_slice(f) - &mu;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians given their moments.
pub fn frechet_from_moments(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let root_a = sym_sqrt(cov_a);
    let inner = &root_a * cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let trace_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt
}

pub const COV_REGULARIZATION: f64 = 1e-6;

/// FID between two feature sets, covariances regularized by `1e-6 I`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let e = a.first().or(b.first()).map_or(0, Vec::len);
    if a.len() <= e || b.len() <= e {
        return Err(Error::Metric(format!(
            "frechet distance needs more than {e} samples per side (got {} and {}); add samples or regularize",
            a.len(),
            b.len()
        )));
    }
    let (mu_a, mut cov_a) = moments(a);
    let (mu_b, mut cov_b) = moments(b);
    for i in 0..e {
        cov_a[(i, i)] += COV_REGULARIZATION;
        cov_b[(i, i)] += COV_REGULARIZATION;
    }
    Ok(frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b))
}

/// Top-1/2/3 retrieval rates of each motion's own condition against
/// `pool - 1` random distractor conditions.
pub fn r_precision(cond: &[Vec<f64>], motion: &[Vec<f64>], pool: usize, rng: &mut impl Rng) -> Result<[f64; 3]> {
    let n = cond.len();
    if n != motion.len() {
        return Err(Error::Metric("condition and motion feature counts differ".into()));
    }
    if n < pool || pool < 1 {
        return Err(Error::Metric(format!("r-precision needs at least {pool} samples, got {n}")));
    }
    let mut hits = [0usize; 3];
    for i in 0..n {
        let own = euclid(&motion[i], &cond[i]);
        let mut rank = 0;
        for j in sample_indices(rng, n - 1, pool - 1) {
            let j = if j >= i { j + 1 } else { j };
            if euclid(&motion[i], &cond[j]) < own {
                rank += 1;
            }
        }
        for (k, h) in hits.iter_mut().enumerate() {
            if rank <= k {
                *h += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / n as f64))
}

/// Mean distance between paired condition and motion features.
pub fn mm_dist(cond: &[Vec<f64>], motion: &[Vec<f64>]) -> Result<f64> {
    if cond.is_empty() || cond.len() != motion.len() {
        return Err(Error::Metric("mm dist needs equally many non-empty pairs".into()));
    }
    Ok(cond.iter().zip(motion).map(|(c, m)| euclid(c, m)).sum::<f64>() / cond.len() as f64)
}

/// Mean distance over `pairs` disjoint random pairs.
pub fn diversity(feats: &[Vec<f64>], pairs: usize, rng: &mut impl Rng) -> Result<f64> {
    if pairs == 0 || feats.len() < 2 * pairs {
        return Err(Error::Metric(format!(
            "diversity over {pairs} pairs needs {} features, got {}",
            2 * pairs,
            feats.len()
        )));
    }
    let mut idx: Vec<usize> = (0..feats.len()).collect();
    idx.shuffle(rng);
    Ok(idx[..2 * pairs]
        .chunks_exact(2)
        .map(|p| euclid(&feats[p[0]], &feats[p[1]]))
        .sum::<f64>()
        / pairs as f64)
}

/// Mean pairwise distance within each group of repeated generations,
/// averaged over groups.
pub fn multimodality(groups: &[Vec<Vec<f64>>]) -> Result<f64> {
    if groups.is_empty() || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::Metric("multimodality needs at least two generations per condition".into()));
    }
    let per_group = groups.iter().map(|g| {
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                sum += euclid(&g[i], &g[j]);
                count += 1;
            }
        }
        sum / count as f64
    });
    Ok(per_group.sum::<f64>() / groups.len() as f64)
}

fn parse_fields(line: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut rest = line.trim();
    while !rest.is_empty() {
        let eq = rest
            .find('=')
            .ok_or_else(|| crate::error::format_err("report line", format!("missing `=` in `{rest}`")))?;
        let key = rest[..eq].trim().to_string();
        rest = &rest[eq + 1..];
        let value;
        if let Some(stripped) = rest.strip_prefix('"') {
            let end = stripped
                .find('"')
                .ok_or_else(|| crate::error::format_err("report line", "unterminated quote"))?;
            value = stripped[..end].to_string();
            rest = stripped[end + 1..].trim_start();
        } else {
            let end = rest.find(' ').unwrap_or(rest.len());
            value = rest[..end].to_string();
            rest = rest[end..].trim_start();
        }
        out.push((key, value));
    }
    Ok(out)
}

fn field<T: FromStr>(fields: &[(String, String)], key: &str) -> Result<T> {
    let raw = fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| crate::error::format_err("report line", format!("missing key `{key}`")))?;
    raw.parse()
        .map_err(|_| crate::error::format_err("report line", format!("bad value `{raw}` for `{key}`")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub fid: f64,
    pub r_top1: f64,
    pub r_top2: f64,
    pub r_top3: f64,
    pub mm_dist: f64,
    pub diversity: f64,
    pub multimodality: f64,
    pub sample_count: usize,
    pub seed: u64,
    pub config_digest: String,
}

impl MetricReport {
    pub fn to_line(&self) -> String {
        format!(
            "fid={} r_top1={} r_top2={} r_top3={} mm_dist={} diversity={} multimodality={} samples={} seed={} config_digest={}",
            self.fid,
            self.r_top1,
            self.r_top2,
            self.r_top3,
            self.mm_dist,
            self.diversity,
            self.multimodality,
            self.sample_count,
            self.seed,
            self.config_digest
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let f = parse_fields(line)?;
        Ok(Self {
            fid: field(&f, "fid")?,
            r_top1: field(&f, "r_top1")?,
            r_top2: field(&f, "r_top2")?,
            r_top3: field(&f, "r_top3")?,
            mm_dist: field(&f, "mm_dist")?,
            diversity: field(&f, "diversity")?,
            multimodality: field(&f, "multimodality")?,
            sample_count: field(&f, "samples")?,
            seed: field(&f, "seed")?,
            config_digest: field(&f, "config_digest")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineTag {
    End2End,
    Cascaded,
}

impl fmt::Display for PipelineTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PipelineTag::End2End => "end2end",
            PipelineTag::Cascaded => "cascaded",
        })
    }
}

impl FromStr for PipelineTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "end2end" => Ok(PipelineTag::End2End),
            "cascaded" => Ok(PipelineTag::Cascaded),
            other => Err(Error::Config(format!("unknown pipeline `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputReport {
    pub pipeline: PipelineTag,
    pub samples_per_sec: f64,
    pub batch: usize,
    pub n_samples: usize,
    pub wall_clock_s: f64,
    pub hardware: String,
}

impl ThroughputReport {
    pub fn to_line(&self) -> String {
        format!(
            "pipeline={} samples_per_sec={} batch={} n_samples={} wall_clock_s={} hardware=\"{}\"",
            self.pipeline,
            self.samples_per_sec,
            self.batch,
            self.n_samples,
            self.wall_clock_s,
            self.hardware.replace('"', "'")
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let f = parse_fields(line)?;
        Ok(Self {
            pipeline: field(&f, "pipeline")?,
            samples_per_sec: field(&f, "samples_per_sec")?,
            batch: field(&f, "batch")?,
            n_samples: field(&f, "n_samples")?,
            wall_clock_s: field(&f, "wall_clock_s")?,
            hardware: field(&f, "hardware")?,
        })
    }
}

/// CPU model from `/proc/cpuinfo`, or the target triple elsewhere.
pub fn hardware_note() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
        s.lines()
            .find(|l| l.starts_with("model name"))
            .and_then(|l| l.split(':').nth(1))
            .map(|m| m.trim().to_string())
    });
    format!(
        "{} ({}, 1 thread)",
        model.unwrap_or_else(|| "unknown cpu".into()),
        std::env::consts::ARCH
    )
}

/// Times `n_samples` batch-1 generations after `warmup` untimed ones.
pub fn bench_throughput(
    tag: PipelineTag,
    n_samples: usize,
    warmup: usize,
    mut generate: impl FnMut(usize) -> Result<()>,
) -> Result<ThroughputReport> {
    if n_samples == 0 {
        return Err(Error::Metric("benchmark needs at least one sample".into()));
    }
    for i in 0..warmup {
        generate(i)?;
    }
    let start = Instant::now();
    for i in 0..n_samples {
        generate(warmup + i)?;
    }
    let wall = start.elapsed().as_secs_f64();
    Ok(ThroughputReport {
        pipeline: tag,
        samples_per_sec: n_samples as f64 / wall,
        batch: 1,
        n_samples,
        wall_clock_s: wall,
        hardware: hardware_note(),
    })
}

/// Times two pipelines on the same sample indices, alternating which goes
/// first, so slow drift in machine speed lands on both equally.
pub fn bench_paired(
    tags: [PipelineTag; 2],
    n_samples: usize,
    warmup: usize,
    mut generate: impl FnMut(usize, usize) -> Result<()>,
) -> Result<[ThroughputReport; 2]> {
    if n_samples == 0 {
        return Err(Error::Metric("benchmark needs at least one sample".into()));
    }
    for i in 0..warmup {
        generate(0, i)?;
        generate(1, i)?;
    }
    let mut wall = [0.0; 2];
    for i in 0..n_samples {
        let order = if i % 2 == 0 { [0, 1] } else { [1, 0] };
        for p in order {
            let start = Instant::now();
            generate(p, warmup + i)?;
            wall[p] += start.elapsed().as_secs_f64();
        }
    }
    Ok([0, 1].map(|p| ThroughputReport {
        pipeline: tags[p],
        samples_per_sec: n_samples as f64 / wall[p],
        batch: 1,
        n_samples,
        wall_clock_s: wall[p],
        hardware: hardware_note(),
    }))
}

pub const REFERENCE_MEM_RETR_FID: f64 = 0.121;
pub const REFERENCE_MEM_RETR_R_TOP1: f64 = 0.519;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub kind: CompressorKind,
    pub report: MetricReport,
}

/// Markdown table in the compressor-ablation column layout with the
/// full-scale published reference in the footer.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("| Compressor | FID | R-top1 | R-top2 | R-top3 | MM Dist |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for r in rows {
        let m = &r.report;
        out.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            r.kind.label(),
            m.fid,
            m.r_top1,
            m.r_top2,
            m.r_top3,
            m.mm_dist
        ));
    }
    out.push_str(&format!(
        "\npublished reference (Mem-Retr, full scale): FID {REFERENCE_MEM_RETR_FID}, R-top1 {REFERENCE_MEM_RETR_R_TOP1}\n"
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_lines_round_trip() {
        let m = MetricReport {
            fid: 0.1234567890123,
            r_top1: 0.5,
            r_top2: 0.75,
            r_top3: 0.875,
            mm_dist: 1.0 / 3.0,
            diversity: 2.5,
            multimodality: 0.1,
            sample_count: 256,
            seed: 7,
            config_digest: "ab12".into(),
        };
        assert_eq!(MetricReport::parse_line(&m.to_line()).unwrap(), m);
        let t = ThroughputReport {
            pipeline: PipelineTag::Cascaded,
            samples_per_sec: 12.345678,
            batch: 1,
            n_samples: 256,
            wall_clock_s: 20.7,
            hardware: "Some CPU (x86_64, 1 thread)".into(),
        };
        assert_eq!(ThroughputReport::parse_line(&t.to_line()).unwrap(), t);
    }

    #[test]
    fn table_has_one_row_per_kind() {
        let report = MetricReport::parse_line(
            "fid=1 r_top1=0.1 r_top2=0.2 r_top3=0.3 mm_dist=1 diversity=1 multimodality=1 samples=1 seed=0 config_digest=x",
        )
        .unwrap();
        let rows: Vec<AblationRow> = CompressorKind::ALL
            .iter()
            .map(|&kind| AblationRow {
                kind,
                report: report.clone(),
            })
            .collect();
        let table = ablation_table(&rows);
        assert_eq!(table.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Compressor")).count(), 6);
        assert!(table.contains("FID 0.121, R-top1 0.519"));
    }
}
