//! Single-shot identification protocol: gallery/probe construction,
//! distance matrices, CMC curves and rank-1 rates, plus the CSV writers
//! for the run artifacts.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metric::distance;
use crate::model::Model;
use crate::train::EpochStats;
use crate::Real;

/// Identification rates indexed by rank k = 1..K.
#[derive(Debug, Clone, PartialEq)]
pub struct CmcCurve {
    pub rates: Vec<Real>,
}

impl CmcCurve {
    pub fn rank1(&self) -> Real {
        assert!(!self.rates.is_empty(), "empty CMC curve");
        self.rates[0]
    }
}

pub fn rank1(curve: &CmcCurve) -> Real {
    curve.rank1()
}

/// Gallery holds one sample per identity (camera B); probes are all
/// camera-A samples. Values are dataset sample indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub gallery: Vec<usize>,
    pub probes: Vec<usize>,
}

/// Builds a single-shot split from the given dataset split. The probe
/// camera is the lowest camera id present, the gallery camera the next
/// one. One gallery image per identity is drawn uniformly; all probe
/// camera images are kept. Deterministic given the rng state.
pub fn make_single_shot_split(
    dataset: &Dataset,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Result<EvalSplit> {
    let idx = dataset.indices_of(split);
    if idx.is_empty() {
        return Err(Error::Dataset(format!("split {split:?} is empty")));
    }
    let mut cameras: Vec<u32> = idx.iter().map(|&i| dataset.samples[i].camera).collect();
    cameras.sort_unstable();
    cameras.dedup();
    if cameras.len() < 2 {
        return Err(Error::Dataset(
            "single-shot evaluation needs at least two cameras".into(),
        ));
    }
    let (cam_a, cam_b) = (cameras[0], cameras[1]);

    let mut identities: Vec<u32> = idx.iter().map(|&i| dataset.samples[i].identity).collect();
    identities.sort_unstable();
    identities.dedup();

    let mut missing = Vec::new();
    let mut gallery = Vec::with_capacity(identities.len());
    for &id in &identities {
        let pool: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| dataset.samples[i].identity == id && dataset.samples[i].camera == cam_b)
            .collect();
        let has_probe = idx
            .iter()
            .any(|&i| dataset.samples[i].identity == id && dataset.samples[i].camera == cam_a);
        if pool.is_empty() || !has_probe {
            missing.push(id);
            continue;
        }
        gallery.push(pool[rng.gen_range(0..pool.len())]);
    }
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "identities missing a camera: {missing:?}"
        )));
    }
    let probes: Vec<usize> = idx
        .iter()
        .copied()
        .filter(|&i| dataset.samples[i].camera == cam_a)
        .collect();
    Ok(EvalSplit { gallery, probes })
}

/// Entry (i, j) = d(extract(probe_i), extract(gallery_j)), row-major.
pub fn distance_matrix(dataset: &Dataset, split: &EvalSplit, model: &Model) -> Result<Vec<Vec<Real>>> {
    let probe_feats = model.features(dataset, &split.probes)?;
    let gallery_feats = model.features(dataset, &split.gallery)?;
    probe_feats
        .par_iter()
        .map(|p| {
            gallery_feats
                .iter()
                .map(|g| distance(p, g, &model.metric))
                .collect::<Result<Vec<Real>>>()
        })
        .collect()
}

/// CMC with pessimistic tie handling: the true match is ranked last
/// among gallery entries at equal distance.
pub fn cmc(matrix: &[Vec<Real>], probe_ids: &[u32], gallery_ids: &[u32]) -> Result<CmcCurve> {
    if matrix.len() != probe_ids.len() {
        return Err(Error::dimension(
            "cmc rows vs probe ids",
            &[matrix.len()],
            &[probe_ids.len()],
        ));
    }
    let k = gallery_ids.len();
    let mut hits = vec![0usize; k];
    for (row, &pid) in matrix.iter().zip(probe_ids) {
        if row.len() != k {
            return Err(Error::dimension("cmc row width", &[row.len()], &[k]));
        }
        let true_col = gallery_ids
            .iter()
            .position(|&g| g == pid)
            .ok_or_else(|| Error::Dataset(format!("probe identity {pid} not in gallery")))?;
        let d_true = row[true_col];
        let mut rank = 1;
        for (j, &d) in row.iter().enumerate() {
            if j != true_col && d <= d_true {
                rank += 1;
            }
        }
        hits[rank - 1] += 1;
    }
    let n = probe_ids.len() as Real;
    let mut rates = Vec::with_capacity(k);
    let mut cum = 0usize;
    for h in hits {
        cum += h;
        rates.push(cum as Real / n);
    }
    Ok(CmcCurve { rates })
}

/// Full evaluation convenience: split, distances, CMC.
pub fn evaluate(
    dataset: &Dataset,
    split: Split,
    model: &Model,
    seed: u64,
) -> Result<(EvalSplit, CmcCurve)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let es = make_single_shot_split(dataset, split, &mut rng)?;
    let matrix = distance_matrix(dataset, &es, model)?;
    let probe_ids: Vec<u32> = es.probes.iter().map(|&i| dataset.samples[i].identity).collect();
    let gallery_ids: Vec<u32> = es.gallery.iter().map(|&i| dataset.samples[i].identity).collect();
    let curve = cmc(&matrix, &probe_ids, &gallery_ids)?;
    Ok((es, curve))
}

pub fn write_cmc_csv(curve: &CmcCurve, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "rank,identification_rate")?;
    for (k, r) in curve.rates.iter().enumerate() {
        writeln!(f, "{},{}", k + 1, r)?;
    }
    Ok(())
}

pub fn write_spectrum_csv(spectrum: &[Real], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "index,singular_value")?;
    for (i, s) in spectrum.iter().enumerate() {
        writeln!(f, "{i},{s}")?;
    }
    Ok(())
}

pub fn write_loss_csv(trace: &[EpochStats], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,mean_loss,mean_d_pos,mean_d_neg,penalty")?;
    for e in trace {
        writeln!(
            f,
            "{},{},{},{},{}",
            e.epoch, e.mean_loss, e.mean_d_pos, e.mean_d_neg, e.penalty
        )?;
    }
    Ok(())
}
