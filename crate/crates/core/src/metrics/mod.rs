//! Evaluation against the synthetic oracle.
//!
//! "Expression" metrics use the mouth channels and "pose" metrics use the
//! remaining channels. The sync proxy correlates generated mouth channels
//! with the oracle's noise-free mouth signal, which plays the role a
//! pretrained audio-visual sync network plays on real video.

mod kmeans;

use nalgebra::{DMatrix, SymmetricEigen};

pub use kmeans::{KMeans, KMEANS_ITERATIONS};

use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::world::OracleEpisode;

pub const SID_WINDOW: usize = 8;
pub const K_EXP: usize = 8;
pub const K_POSE: usize = 4;
pub const SYNC_MAX_OFFSET: usize = 5;
pub const COV_RIDGE: f64 = 1e-6;
pub const CLUSTER_SEED: u64 = 0;
pub const EPISODE_CSV_HEADER: &str = "episode,sync,offset,fd_exp,fd_pose,mse,var_exp,var_pose,sid_exp,sid_pose,drift";

/// Pearson correlation; `None` if either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn columns(motion: &Tensor, channels: &[usize]) -> Result<Tensor> {
    if let Some(&c) = channels.iter().find(|&&c| c >= motion.cols()) {
        return Err(Error::Shape(format!("channel {c} of {}", motion.cols())));
    }
    let data = (0..motion.rows())
        .flat_map(|i| channels.iter().map(move |&c| motion.row(i)[c]))
        .collect();
    Tensor::matrix(motion.rows(), channels.len(), data)
}

/// Correlation of generated mouth channels with the oracle signal at each
/// offset `tau` in `-max..=max`, pairing generated frame `i` with oracle
/// frame `i + tau`. Entries are `None` where a side is constant.
pub fn sync_curve(generated: &Tensor, ep: &OracleEpisode, max_offset: usize) -> Result<Vec<(i64, Option<f64>)>> {
    if generated.rows() != ep.frames() {
        return Err(Error::Shape(format!(
            "{} generated frames for a {}-frame episode",
            generated.rows(),
            ep.frames()
        )));
    }
    if ep.mouth_channels.is_empty() {
        return Err(Error::Input("episode has no mouth channels".into()));
    }
    let gen = columns(generated, &ep.mouth_channels)?;
    let oracle = &ep.deterministic_mouth_signal;
    let n = generated.rows() as i64;
    let mut out = Vec::new();
    for tau in -(max_offset as i64)..=(max_offset as i64) {
        let lo = (-tau).max(0);
        let hi = (n - tau).min(n);
        if hi - lo < 2 {
            out.push((tau, None));
            continue;
        }
        let a: Vec<f64> = (lo..hi).flat_map(|i| gen.row(i as usize).to_vec()).collect();
        let b: Vec<f64> = (lo..hi).flat_map(|i| oracle.row((i + tau) as usize).to_vec()).collect();
        out.push((tau, pearson(&a, &b)));
    }
    Ok(out)
}

/// Maximum correlation over offsets and the offset attaining it. A
/// generated signal lagging the oracle by `s` frames peaks at `-s`.
pub fn sync_proxy(generated: &Tensor, ep: &OracleEpisode, max_offset: usize) -> Result<(f64, i64)> {
    best_offset(&sync_curve(generated, ep, max_offset)?)
}

fn best_offset(curve: &[(i64, Option<f64>)]) -> Result<(f64, i64)> {
    let mut best: Option<(f64, i64)> = None;
    for &(tau, c) in curve {
        if let Some(c) = c {
            let better = match best {
                None => true,
                Some((b, bt)) => c > b || (c == b && tau.abs() < bt.abs()),
            };
            if better {
                best = Some((c, tau));
            }
        }
    }
    best.ok_or_else(|| Error::Input("sync proxy of a constant signal is undefined".into()))
}

fn moments(x: &Tensor) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let r = x.row(i);
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    (mean, cov / (n as f64 - 1.0))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// Squared Fréchet distance between Gaussians fitted to the rows of `a` and
/// `b`: `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`. The trace of
/// the root uses the symmetric form `sqrt(S_a)^T S_b sqrt(S_a)`.
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!("dims {} and {}", a.cols(), b.cols())));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::Input("need at least two samples per side".into()));
    }
    let d = a.cols();
    let (ma, mut sa) = moments(a);
    let (mb, mut sb) = moments(b);
    if a.rows() < d + 1 || b.rows() < d + 1 {
        for i in 0..d {
            sa[(i, i)] += COV_RIDGE;
            sb[(i, i)] += COV_RIDGE;
        }
    }
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
    let ra = sym_sqrt(&sa);
    let mut inner = &ra * &sb * &ra;
    inner = (&inner + inner.transpose()) * 0.5;
    let root_trace: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    Ok((mean_term + sa.trace() + sb.trace() - 2.0 * root_trace).max(0.0))
}

/// Sum over `channels` of the population variance along time.
pub fn variance_metric(motion: &Tensor, channels: &[usize]) -> Result<f64> {
    if motion.rows() < 2 {
        return Err(Error::Input("variance needs at least two frames".into()));
    }
    let x = columns(motion, channels)?;
    let n = x.rows() as f64;
    let mut total = 0.0;
    for c in 0..x.cols() {
        let col: Vec<f64> = (0..x.rows()).map(|i| x.row(i)[c]).collect();
        let mean = col.iter().sum::<f64>() / n;
        total += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    }
    Ok(total)
}

/// Mean-pooled non-overlapping windows of `channels`; a trailing partial
/// window is dropped.
pub fn window_features(motion: &Tensor, channels: &[usize], window: usize) -> Result<Vec<Vec<f64>>> {
    let x = columns(motion, channels)?;
    Ok((0..x.rows() / window)
        .map(|w| {
            let mut m = vec![0.0; channels.len()];
            for i in w * window..(w + 1) * window {
                m.iter_mut().zip(x.row(i)).for_each(|(a, v)| *a += v);
            }
            m.into_iter().map(|v| v / window as f64).collect()
        })
        .collect())
}

/// Shannon entropy (natural log) of a histogram.
pub fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Cluster model over windows of ground-truth motion.
pub fn fit_clusters(truth: &[Tensor], channels: &[usize], k: usize) -> Result<KMeans> {
    let mut pts = Vec::new();
    for t in truth {
        pts.extend(window_features(t, channels, SID_WINDOW)?);
    }
    KMeans::fit(&pts, k.min(pts.len().max(1)), CLUSTER_SEED)
}

/// Entropy of each sequence's cluster-ID histogram, averaged over sequences.
pub fn sid_metric(sequences: &[Tensor], channels: &[usize], model: &KMeans) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0;
    for s in sequences {
        let windows = window_features(s, channels, SID_WINDOW)?;
        if windows.is_empty() {
            continue;
        }
        let mut counts = vec![0; model.k()];
        for w in &windows {
            counts[model.assign(w)] += 1;
        }
        total += entropy(&counts);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Input(format!(
            "no sequence holds a full {SID_WINDOW}-frame window"
        )));
    }
    Ok(total / used as f64)
}

/// Mean distance of the pose channels from the anchor's over the last 20%
/// of frames (at least one frame).
pub fn drift_metric(motion: &Tensor, anchor: &[f64], pose_channels: &[usize]) -> Result<f64> {
    let n = motion.rows();
    if n == 0 {
        return Err(Error::Input("drift of an empty sequence".into()));
    }
    if anchor.len() != motion.cols() {
        return Err(Error::Shape(format!(
            "anchor dim {} for {}",
            anchor.len(),
            motion.cols()
        )));
    }
    let tail = ((n as f64 * 0.2).ceil() as usize).clamp(1, n);
    let x = columns(motion, pose_channels)?;
    let a: Vec<f64> = pose_channels.iter().map(|&c| anchor[c]).collect();
    let total: f64 = (n - tail..n)
        .map(|i| {
            x.row(i)
                .iter()
                .zip(&a)
                .map(|(v, w)| (v - w) * (v - w))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / tail as f64)
}

pub fn mse_metric(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::Input("mse of empty tensors".into()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub sync_proxy: f64,
    pub sync_offset_frames: i64,
    pub fd_exp: f64,
    pub fd_pose: f64,
    pub mse: f64,
    pub var_exp: f64,
    pub var_pose: f64,
    pub sid_exp: f64,
    pub sid_pose: f64,
    pub drift: f64,
}

impl MetricsReport {
    pub fn to_kv(&self) -> String {
        format!(
            "# exp = mouth channels, pose = remaining channels\n\
             sync_proxy={:?}\nsync_offset_frames={}\nfd_exp={:?}\nfd_pose={:?}\nmse={:?}\n\
             var_exp={:?}\nvar_pose={:?}\nsid_exp={:?}\nsid_pose={:?}\ndrift={:?}\n",
            self.sync_proxy,
            self.sync_offset_frames,
            self.fd_exp,
            self.fd_pose,
            self.mse,
            self.var_exp,
            self.var_pose,
            self.sid_exp,
            self.sid_pose,
            self.drift
        )
    }

    pub fn csv_row(&self, episode: usize) -> String {
        format!(
            "{episode},{:?},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.sync_proxy,
            self.sync_offset_frames,
            self.fd_exp,
            self.fd_pose,
            self.mse,
            self.var_exp,
            self.var_pose,
            self.sid_exp,
            self.sid_pose,
            self.drift
        )
    }

    pub fn is_valid(&self) -> bool {
        let vals = [
            self.sync_proxy,
            self.fd_exp,
            self.fd_pose,
            self.mse,
            self.var_exp,
            self.var_pose,
            self.sid_exp,
            self.sid_pose,
            self.drift,
        ];
        vals.iter().all(|v| v.is_finite())
            && (-1.0..=1.0).contains(&self.sync_proxy)
            && vals[1..].iter().all(|&v| v >= 0.0)
    }
}

/// Overall and per-episode reports for `generated[k]` against `episodes[k]`.
/// Drift is measured against each episode's first ground-truth frame (the
/// inference anchor).
pub fn evaluate(generated: &[Tensor], episodes: &[OracleEpisode]) -> Result<(MetricsReport, Vec<MetricsReport>)> {
    if generated.is_empty() || generated.len() != episodes.len() {
        return Err(Error::Input(format!(
            "{} generated sequences for {} episodes",
            generated.len(),
            episodes.len()
        )));
    }
    let mouth = episodes[0].mouth_channels.clone();
    let dim = episodes[0].motion.cols();
    let pose: Vec<usize> = (0..dim).filter(|c| !mouth.contains(c)).collect();
    let truth: Vec<Tensor> = episodes.iter().map(|e| e.motion.clone()).collect();
    let km_exp = fit_clusters(&truth, &mouth, K_EXP)?;
    let km_pose = fit_clusters(&truth, &pose, K_POSE)?;

    let mut rows = Vec::new();
    let mut curve_sum: Vec<(i64, f64, usize)> = Vec::new();
    for (g, ep) in generated.iter().zip(episodes) {
        let curve = sync_curve(g, ep, SYNC_MAX_OFFSET)?;
        if curve_sum.is_empty() {
            curve_sum = curve.iter().map(|&(t, _)| (t, 0.0, 0)).collect();
        }
        for (acc, &(_, c)) in curve_sum.iter_mut().zip(&curve) {
            if let Some(c) = c {
                acc.1 += c;
                acc.2 += 1;
            }
        }
        let (sync, offset) = best_offset(&curve).unwrap_or((0.0, 0));
        let one = std::slice::from_ref(g);
        rows.push(MetricsReport {
            sync_proxy: sync,
            sync_offset_frames: offset,
            fd_exp: frechet_distance(&columns(g, &mouth)?, &columns(&ep.motion, &mouth)?)?,
            fd_pose: frechet_distance(&columns(g, &pose)?, &columns(&ep.motion, &pose)?)?,
            mse: mse_metric(g, &ep.motion)?,
            var_exp: variance_metric(g, &mouth)?,
            var_pose: variance_metric(g, &pose)?,
            sid_exp: sid_metric(one, &mouth, &km_exp).unwrap_or(0.0),
            sid_pose: sid_metric(one, &pose, &km_pose).unwrap_or(0.0),
            drift: drift_metric(g, ep.motion.row(0), &pose)?,
        });
    }
    let mean_curve: Vec<(i64, Option<f64>)> = curve_sum
        .iter()
        .map(|&(t, s, n)| (t, (n > 0).then(|| s / n as f64)))
        .collect();
    let (sync, offset) = best_offset(&mean_curve)?;
    let stack = |xs: &[Tensor], ch: &[usize]| -> Result<Tensor> {
        let parts = xs.iter().map(|x| columns(x, ch)).collect::<Result<Vec<_>>>()?;
        let rows: usize = parts.iter().map(Tensor::rows).sum();
        Tensor::matrix(rows, ch.len(), parts.into_iter().flat_map(Tensor::into_data).collect())
    };
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let all: Vec<usize> = (0..dim).collect();
    let overall = MetricsReport {
        sync_proxy: sync,
        sync_offset_frames: offset,
        fd_exp: frechet_distance(&stack(generated, &mouth)?, &stack(&truth, &mouth)?)?,
        fd_pose: frechet_distance(&stack(generated, &pose)?, &stack(&truth, &pose)?)?,
        mse: mse_metric(&stack(generated, &all)?, &stack(&truth, &all)?)?,
        var_exp: mean(|r| r.var_exp),
        var_pose: mean(|r| r.var_pose),
        sid_exp: sid_metric(generated, &mouth, &km_exp)?,
        sid_pose: sid_metric(generated, &pose, &km_pose)?,
        drift: mean(|r| r.drift),
    };
    Ok((overall, rows))
}
