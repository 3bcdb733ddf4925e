//! Open-set verification and identification metrics over embeddings:
//! cosine scoring against per-identity galleries, step-function ROC curves
//! on a fixed false-match-rate grid, equal error rate, area under the
//! curve, rank-1 identification, and subgroup breakdowns.

use crate::backbone::EdgeEarModel;
use crate::data::{stack_images, Dataset, Subgroup};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

/// Number of grid intervals for ROC curves; curves have `ROC_GRID + 1`
/// points at false-match-rate targets i / ROC_GRID.
pub const ROC_GRID: usize = 1000;

/// One embedded sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub sample_id: String,
    pub identity: usize,
    pub subgroup: Subgroup,
    pub embedding: Vec<f64>,
}

/// A validated collection of embeddings: consistent width, unique sample
/// ids, finite values, and one subgroup per identity.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub records: Vec<EmbeddingRecord>,
    pub dim: usize,
}

impl EmbeddingSet {
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Dimension("embedding set is empty".into()));
        }
        let dim = records[0].embedding.len();
        if dim == 0 {
            return Err(Error::Dimension("embeddings have zero width".into()));
        }
        let mut ids = BTreeSet::new();
        let mut subgroup_of: BTreeMap<usize, &Subgroup> = BTreeMap::new();
        for r in &records {
            if r.embedding.len() != dim {
                return Err(Error::Dimension(format!(
                    "sample {} has width {}, set started at {}",
                    r.sample_id,
                    r.embedding.len(),
                    dim
                )));
            }
            if !r.embedding.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "embedding for sample {} is not finite",
                    r.sample_id
                )));
            }
            if !ids.insert(r.sample_id.clone()) {
                return Err(Error::Contract(format!(
                    "duplicate sample id {}",
                    r.sample_id
                )));
            }
            match subgroup_of.get(&r.identity) {
                None => {
                    subgroup_of.insert(r.identity, &r.subgroup);
                }
                Some(s) if **s == r.subgroup => {}
                Some(s) => {
                    return Err(Error::Contract(format!(
                        "identity {} appears with subgroups {:?} and {:?}",
                        r.identity, s, r.subgroup
                    )));
                }
            }
        }
        Ok(EmbeddingSet { records, dim })
    }

    pub fn identities(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.identity).collect()
    }

    /// Columns: sample_id, identity, ethnicity, gender, e0..e{dim-1}.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let mut header = vec![
            "sample_id".to_string(),
            "identity".to_string(),
            "ethnicity".to_string(),
            "gender".to_string(),
        ];
        for i in 0..self.dim {
            header.push(format!("e{}", i));
        }
        w.write_record(&header)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for r in &self.records {
            let mut row = vec![
                r.sample_id.clone(),
                r.identity.to_string(),
                r.subgroup.ethnicity.clone(),
                r.subgroup.gender.clone(),
            ];
            for v in &r.embedding {
                row.push(format!("{}", v));
            }
            w.write_record(&row)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<EmbeddingSet> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::Load(format!("cannot read {}: {}", path.display(), e)))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Load(format!("bad csv header: {}", e)))?
            .clone();
        if headers.len() < 5
            || &headers[0] != "sample_id"
            || &headers[1] != "identity"
            || &headers[2] != "ethnicity"
            || &headers[3] != "gender"
        {
            return Err(Error::Load(
                "embedding csv must start with sample_id,identity,ethnicity,gender".into(),
            ));
        }
        let dim = headers.len() - 4;
        for i in 0..dim {
            if headers[4 + i] != format!("e{}", i) {
                return Err(Error::Load(format!(
                    "embedding column {} is named {:?}, expected e{}",
                    4 + i,
                    &headers[4 + i],
                    i
                )));
            }
        }
        let mut records = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Load(format!("bad csv row: {}", e)))?;
            if rec.len() != 4 + dim {
                return Err(Error::Load(format!(
                    "row for {:?} has {} fields, expected {}",
                    rec.get(0).unwrap_or(""),
                    rec.len(),
                    4 + dim
                )));
            }
            let identity = rec[1]
                .parse::<usize>()
                .map_err(|_| Error::Load(format!("identity {:?} is not a number", &rec[1])))?;
            let mut embedding = Vec::with_capacity(dim);
            for i in 0..dim {
                embedding.push(rec[4 + i].parse::<f64>().map_err(|_| {
                    Error::Load(format!("value {:?} in e{} is not a number", &rec[4 + i], i))
                })?);
            }
            records.push(EmbeddingRecord {
                sample_id: rec[0].to_string(),
                identity,
                subgroup: Subgroup {
                    ethnicity: rec[2].to_string(),
                    gender: rec[3].to_string(),
                },
                embedding,
            });
        }
        EmbeddingSet::new(records)
    }
}

/// Embed every sample of a dataset in fixed-size batches. Per-sample
/// results do not depend on the batch split.
pub fn embed_dataset(
    model: &EdgeEarModel,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<EmbeddingSet> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if dataset.image_size != model.config.input_size {
        return Err(Error::Dimension(format!(
            "dataset images are {}px but the model expects {}px",
            dataset.image_size, model.config.input_size
        )));
    }
    let mut records = Vec::with_capacity(dataset.samples.len());
    let indices: Vec<usize> = (0..dataset.samples.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let batch = stack_images(&dataset.samples, chunk)?;
        let out = model.embed(&batch)?;
        let dim = out.shape()[1];
        for (row, &i) in chunk.iter().enumerate() {
            let s = &dataset.samples[i];
            records.push(EmbeddingRecord {
                sample_id: s.sample_id.clone(),
                identity: s.identity,
                subgroup: s.subgroup.clone(),
                embedding: out.data()[row * dim..(row + 1) * dim].to_vec(),
            });
        }
    }
    EmbeddingSet::new(records)
}

/// Pairwise cosine similarities, probes as rows and gallery as columns.
/// A zero-norm embedding on either side is a numeric error.
pub fn cosine_matrix(probes: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<Vec<f64>> {
    if probes.dim != gallery.dim {
        return Err(Error::Dimension(format!(
            "probe width {} does not match gallery width {}",
            probes.dim, gallery.dim
        )));
    }
    let norms = |set: &EmbeddingSet| -> Result<Vec<f64>> {
        set.records
            .iter()
            .map(|r| {
                let mut s = 0.0;
                for v in &r.embedding {
                    s += v * v;
                }
                if s == 0.0 {
                    return Err(Error::Numeric(format!(
                        "embedding for sample {} has zero norm",
                        r.sample_id
                    )));
                }
                Ok(s.sqrt())
            })
            .collect()
    };
    let pn = norms(probes)?;
    let gn = norms(gallery)?;
    let mut out = Vec::with_capacity(probes.records.len() * gallery.records.len());
    for (p, pnorm) in probes.records.iter().zip(&pn) {
        for (g, gnorm) in gallery.records.iter().zip(&gn) {
            let mut dot = 0.0;
            for (a, b) in p.embedding.iter().zip(&g.embedding) {
                dot += a * b;
            }
            out.push(dot / (pnorm * gnorm));
        }
    }
    Ok(out)
}

/// How per-sample similarities combine into one probe-vs-identity score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Max,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Mean => write!(f, "mean"),
            Aggregation::Max => write!(f, "max"),
        }
    }
}

/// Probe-vs-identity score matrix with its eligibility mask. A probe's own
/// identity is ineligible when the gallery holds no other sample of it.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub probe_ids: Vec<String>,
    pub probe_identity: Vec<usize>,
    /// Distinct identity labels, ascending; one column each.
    pub identities: Vec<usize>,
    /// Row-major [probes x identities].
    pub scores: Vec<f64>,
    pub eligible: Vec<bool>,
}

impl ScoreTable {
    pub fn num_probes(&self) -> usize {
        self.probe_ids.len()
    }

    /// Keep only probes and columns of the given identities.
    pub fn restricted(&self, keep: &BTreeSet<usize>) -> ScoreTable {
        let cols: Vec<usize> = self
            .identities
            .iter()
            .enumerate()
            .filter(|(_, id)| keep.contains(id))
            .map(|(c, _)| c)
            .collect();
        let rows: Vec<usize> = (0..self.num_probes())
            .filter(|&r| keep.contains(&self.probe_identity[r]))
            .collect();
        let w = self.identities.len();
        let mut scores = Vec::with_capacity(rows.len() * cols.len());
        let mut eligible = Vec::with_capacity(rows.len() * cols.len());
        for &r in &rows {
            for &c in &cols {
                scores.push(self.scores[r * w + c]);
                eligible.push(self.eligible[r * w + c]);
            }
        }
        ScoreTable {
            probe_ids: rows.iter().map(|&r| self.probe_ids[r].clone()).collect(),
            probe_identity: rows.iter().map(|&r| self.probe_identity[r]).collect(),
            identities: cols.iter().map(|&c| self.identities[c]).collect(),
            scores,
            eligible,
        }
    }
}

/// Score every sample against every identity's gallery, leaving the probe
/// itself out of its own identity's gallery.
pub fn identity_scores(set: &EmbeddingSet, aggregation: Aggregation) -> Result<ScoreTable> {
    let sims = cosine_matrix(set, set)?;
    let n = set.records.len();
    let identities: Vec<usize> = set.identities().into_iter().collect();
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in set.records.iter().enumerate() {
        members.entry(r.identity).or_default().push(i);
    }
    let mut scores = vec![0.0; n * identities.len()];
    let mut eligible = vec![false; n * identities.len()];
    for p in 0..n {
        for (c, id) in identities.iter().enumerate() {
            let mut count = 0usize;
            let mut acc = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for &g in &members[id] {
                if set.records[g].sample_id == set.records[p].sample_id {
                    continue;
                }
                let s = sims[p * n + g];
                sum += s;
                acc = acc.max(s);
                count += 1;
            }
            if count > 0 {
                scores[p * identities.len() + c] = match aggregation {
                    Aggregation::Mean => sum / count as f64,
                    Aggregation::Max => acc,
                };
                eligible[p * identities.len() + c] = true;
            }
        }
    }
    Ok(ScoreTable {
        probe_ids: set.records.iter().map(|r| r.sample_id.clone()).collect(),
        probe_identity: set.records.iter().map(|r| r.identity).collect(),
        identities,
        scores,
        eligible,
    })
}

/// A step-function ROC sampled at false-match-rate targets i / ROC_GRID.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub fmr: Vec<f64>,
    pub fnmr: Vec<f64>,
}

impl RocCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        w.write_record(["fmr", "fnmr"])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for (f, n) in self.fmr.iter().zip(&self.fnmr) {
            w.write_record([format!("{}", f), format!("{}", n)])
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        Ok(())
    }
}

/// ROC of one identity's genuine/impostor score sets on the shared grid.
///
/// For target false-match rate f, the accept threshold is set so that at
/// most floor(f * impostors) impostor scores exceed it; the false non-match
/// rate is the share of genuine scores at or below that threshold.
pub fn roc_from_scores(genuine: &[f64], impostor: &[f64]) -> Result<RocCurve> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Analysis(
            "roc needs at least one genuine and one impostor score".into(),
        ));
    }
    let mut imp = impostor.to_vec();
    imp.sort_by(|a, b| b.partial_cmp(a).expect("scores must be comparable"));
    let n_imp = imp.len();
    let n_gen = genuine.len();
    let mut fmr = Vec::with_capacity(ROC_GRID + 1);
    let mut fnmr = Vec::with_capacity(ROC_GRID + 1);
    for i in 0..=ROC_GRID {
        let budget = i * n_imp / ROC_GRID;
        let misses = if budget < n_imp {
            let t = imp[budget];
            genuine.iter().filter(|&&g| g <= t).count()
        } else {
            0
        };
        fmr.push(i as f64 / ROC_GRID as f64);
        fnmr.push(misses as f64 / n_gen as f64);
    }
    Ok(RocCurve { fmr, fnmr })
}

/// Per-identity curve with its label.
#[derive(Debug, Clone)]
pub struct IdentityRoc {
    pub identity: usize,
    pub genuine: usize,
    pub impostor: usize,
    pub curve: RocCurve,
}

/// Compute a curve per identity, skipping identities without genuine or
/// impostor scores, then average the miss rates pointwise.
pub fn macro_roc(table: &ScoreTable) -> Result<(RocCurve, Vec<IdentityRoc>)> {
    let w = table.identities.len();
    let mut per_identity = Vec::new();
    for (c, &id) in table.identities.iter().enumerate() {
        let mut genuine = Vec::new();
        let mut impostor = Vec::new();
        for p in 0..table.num_probes() {
            if !table.eligible[p * w + c] {
                continue;
            }
            let s = table.scores[p * w + c];
            if table.probe_identity[p] == id {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
        if genuine.is_empty() || impostor.is_empty() {
            log::warn!(
                "identity {} has {} genuine and {} impostor scores; skipping its curve",
                id,
                genuine.len(),
                impostor.len()
            );
            continue;
        }
        per_identity.push(IdentityRoc {
            identity: id,
            genuine: genuine.len(),
            impostor: impostor.len(),
            curve: roc_from_scores(&genuine, &impostor)?,
        });
    }
    if per_identity.is_empty() {
        return Err(Error::Analysis(
            "no identity produced an roc curve; need identities with 2+ samples".into(),
        ));
    }
    let mut fnmr = vec![0.0; ROC_GRID + 1];
    for ir in &per_identity {
        for (acc, v) in fnmr.iter_mut().zip(&ir.curve.fnmr) {
            *acc += v;
        }
    }
    let k = per_identity.len() as f64;
    for v in &mut fnmr {
        *v /= k;
    }
    let fmr = (0..=ROC_GRID).map(|i| i as f64 / ROC_GRID as f64).collect();
    Ok((RocCurve { fmr, fnmr }, per_identity))
}

/// Equal error rate of a grid curve. The miss rate is non-increasing while
/// the grid rate increases, so their difference crosses zero exactly once;
/// the crossing is located by linear interpolation between grid points.
pub fn eer_of(curve: &RocCurve) -> f64 {
    let n = curve.fmr.len();
    let d = |i: usize| curve.fnmr[i] - curve.fmr[i];
    if d(0) <= 0.0 {
        return (curve.fnmr[0] + curve.fmr[0]) / 2.0;
    }
    for i in 1..n {
        let di = d(i);
        if di == 0.0 {
            return curve.fmr[i];
        }
        if di < 0.0 {
            let prev = d(i - 1);
            let alpha = prev / (prev - di);
            return curve.fmr[i - 1] + alpha * (curve.fmr[i] - curve.fmr[i - 1]);
        }
    }
    // the curve never reached the diagonal; report the final point's rates
    (curve.fnmr[n - 1] + curve.fmr[n - 1]) / 2.0
}

/// Trapezoidal area under the match-rate curve (1 - fnmr over fmr).
pub fn auc_of(curve: &RocCurve) -> f64 {
    let mut area = 0.0;
    for i in 1..curve.fmr.len() {
        let df = curve.fmr[i] - curve.fmr[i - 1];
        let a = 1.0 - curve.fnmr[i - 1];
        let b = 1.0 - curve.fnmr[i];
        area += df * (a + b) / 2.0;
    }
    area
}

/// Miss rate at a grid false-match-rate target (e.g. 0.01).
pub fn fnmr_at(curve: &RocCurve, target: f64) -> Result<f64> {
    let idx = (target * ROC_GRID as f64).round() as usize;
    if idx >= curve.fnmr.len() || (target * ROC_GRID as f64 - idx as f64).abs() > 1e-9 {
        return Err(Error::Analysis(format!(
            "fmr target {} is not on the {}-interval grid",
            target, ROC_GRID
        )));
    }
    Ok(curve.fnmr[idx])
}

/// Closed-set rank-1 identification over the score table. Probes whose own
/// identity is ineligible are skipped; an exact score tie spanning more
/// than one identity at the top is an error, naming the probe.
pub fn rank1_of(table: &ScoreTable) -> Result<f64> {
    let w = table.identities.len();
    let mut used = 0usize;
    let mut correct = 0usize;
    for p in 0..table.num_probes() {
        let own_col = table
            .identities
            .iter()
            .position(|&id| id == table.probe_identity[p]);
        let own_col = match own_col {
            Some(c) if table.eligible[p * w + c] => c,
            _ => continue,
        };
        let mut best = f64::NEG_INFINITY;
        let mut best_cols: Vec<usize> = Vec::new();
        for c in 0..w {
            if !table.eligible[p * w + c] {
                continue;
            }
            let s = table.scores[p * w + c];
            if s > best {
                best = s;
                best_cols.clear();
                best_cols.push(c);
            } else if s == best {
                best_cols.push(c);
            }
        }
        if best_cols.len() > 1 {
            return Err(Error::Analysis(format!(
                "probe {} has a {}-way score tie at the top; identification is undefined",
                table.probe_ids[p],
                best_cols.len()
            )));
        }
        used += 1;
        if best_cols[0] == own_col {
            correct += 1;
        }
    }
    if used == 0 {
        return Err(Error::Analysis(
            "no probe had an eligible gallery for its own identity".into(),
        ));
    }
    Ok(correct as f64 / used as f64)
}

/// One subgroup cell's curve and summary, restricted to probes and
/// galleries within the cell.
#[derive(Debug, Clone)]
pub struct SubgroupRoc {
    pub subgroup: Subgroup,
    pub identities: usize,
    pub curve: RocCurve,
    pub eer: f64,
    pub auc: f64,
    pub fnmr_at_1pct: f64,
}

/// Evaluate each (ethnicity, gender) cell separately. Cells with fewer
/// than two identities cannot produce impostor pairs and are skipped with
/// a warning.
pub fn subgroup_rocs(set: &EmbeddingSet, table: &ScoreTable) -> Result<Vec<SubgroupRoc>> {
    let mut cells: BTreeMap<(String, String), BTreeSet<usize>> = BTreeMap::new();
    for r in &set.records {
        cells
            .entry((r.subgroup.ethnicity.clone(), r.subgroup.gender.clone()))
            .or_default()
            .insert(r.identity);
    }
    let mut out = Vec::new();
    for ((ethnicity, gender), ids) in cells {
        if ids.len() < 2 {
            log::warn!(
                "subgroup {}/{} has {} identity; skipping its curve",
                ethnicity,
                gender,
                ids.len()
            );
            continue;
        }
        let sub = table.restricted(&ids);
        let (curve, _) = macro_roc(&sub)?;
        out.push(SubgroupRoc {
            eer: eer_of(&curve),
            auc: auc_of(&curve),
            fnmr_at_1pct: fnmr_at(&curve, 0.01)?,
            subgroup: Subgroup { ethnicity, gender },
            identities: ids.len(),
            curve,
        });
    }
    Ok(out)
}

/// Summary line for one subgroup in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub ethnicity: String,
    pub gender: String,
    pub identities: usize,
    pub eer: f64,
    pub auc: f64,
    pub fnmr_at_1pct: f64,
}

/// Full evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aggregation: Aggregation,
    pub num_probes: usize,
    pub num_identities: usize,
    pub identities_in_roc: usize,
    pub eer: f64,
    pub auc: f64,
    pub fnmr_at_1pct: f64,
    pub rank1: f64,
    pub subgroups: Vec<SubgroupReport>,
}

/// Everything an evaluation produces: the summary plus the curves behind it.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub macro_curve: RocCurve,
    pub per_identity: Vec<IdentityRoc>,
    pub subgroups: Vec<SubgroupRoc>,
}

/// Run the full open-set evaluation of an embedding set.
pub fn evaluate(set: &EmbeddingSet, aggregation: Aggregation) -> Result<Evaluation> {
    let identities = set.identities();
    if identities.len() < 2 {
        return Err(Error::Analysis(format!(
            "evaluation needs at least 2 identities, got {}",
            identities.len()
        )));
    }
    let table = identity_scores(set, aggregation)?;
    let (macro_curve, per_identity) = macro_roc(&table)?;
    let rank1 = rank1_of(&table)?;
    let subgroups = subgroup_rocs(set, &table)?;
    let report = MetricsReport {
        aggregation,
        num_probes: set.records.len(),
        num_identities: identities.len(),
        identities_in_roc: per_identity.len(),
        eer: eer_of(&macro_curve),
        auc: auc_of(&macro_curve),
        fnmr_at_1pct: fnmr_at(&macro_curve, 0.01)?,
        rank1,
        subgroups: subgroups
            .iter()
            .map(|s| SubgroupReport {
                ethnicity: s.subgroup.ethnicity.clone(),
                gender: s.subgroup.gender.clone(),
                identities: s.identities,
                eer: s.eer,
                auc: s.auc,
                fnmr_at_1pct: s.fnmr_at_1pct,
            })
            .collect(),
    };
    Ok(Evaluation {
        report,
        macro_curve,
        per_identity,
        subgroups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::subgroup_for_identity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Embeddings clustered around per-identity directions.
    pub(crate) fn clustered_set(
        identities: usize,
        per_identity: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    ) -> EmbeddingSet {
        let mut r = ChaCha20Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..identities)
            .map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut records = Vec::new();
        for (i, center) in centers.iter().enumerate() {
            for s in 0..per_identity {
                let embedding: Vec<f64> = center
                    .iter()
                    .map(|c| c + spread * r.gen_range(-1.0..1.0))
                    .collect();
                records.push(EmbeddingRecord {
                    sample_id: format!("id{:03}_s{:02}", i, s),
                    identity: i,
                    subgroup: subgroup_for_identity(i),
                    embedding,
                });
            }
        }
        EmbeddingSet::new(records).unwrap()
    }

    #[test]
    fn embedding_set_validates_inputs() {
        let mut records = vec![EmbeddingRecord {
            sample_id: "a".into(),
            identity: 0,
            subgroup: subgroup_for_identity(0),
            embedding: vec![1.0, 0.0],
        }];
        records.push(records[0].clone());
        assert!(EmbeddingSet::new(records.clone()).is_err());
        records[1].sample_id = "b".into();
        assert!(EmbeddingSet::new(records.clone()).is_ok());
        records[1].embedding = vec![1.0];
        assert!(EmbeddingSet::new(records.clone()).is_err());
        records[1].embedding = vec![f64::NAN, 0.0];
        assert!(EmbeddingSet::new(records.clone()).is_err());
        records[1].embedding = vec![1.0, 0.0];
        records[1].subgroup.gender = "other".into();
        assert!(EmbeddingSet::new(records).is_err());
    }

    #[test]
    fn cosine_matrix_known_values_and_zero_norm_error() {
        let recs = vec![
            EmbeddingRecord {
                sample_id: "x".into(),
                identity: 0,
                subgroup: subgroup_for_identity(0),
                embedding: vec![1.0, 0.0],
            },
            EmbeddingRecord {
                sample_id: "y".into(),
                identity: 1,
                subgroup: subgroup_for_identity(1),
                embedding: vec![0.0, 2.0],
            },
            EmbeddingRecord {
                sample_id: "z".into(),
                identity: 2,
                subgroup: subgroup_for_identity(2),
                embedding: vec![3.0, 3.0],
            },
        ];
        let set = EmbeddingSet::new(recs).unwrap();
        let m = cosine_matrix(&set, &set).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-12);
        assert!((m[1] - 0.0).abs() < 1e-12);
        assert!((m[2] - (0.5f64).sqrt()).abs() < 1e-12);
        let mut zset = set.clone();
        zset.records[1].embedding = vec![0.0, 0.0];
        let err = cosine_matrix(&zset, &zset).unwrap_err().to_string();
        assert!(err.contains('y'), "{}", err);
    }

    #[test]
    fn score_table_excludes_self_and_marks_singletons() {
        let set = clustered_set(3, 2, 4, 0.1, 5);
        let mut records = set.records.clone();
        records.push(EmbeddingRecord {
            sample_id: "lone".into(),
            identity: 3,
            subgroup: subgroup_for_identity(3),
            embedding: vec![0.5, 0.4, 0.3, 0.2],
        });
        let set = EmbeddingSet::new(records).unwrap();
        let table = identity_scores(&set, Aggregation::Mean).unwrap();
        assert_eq!(table.identities, vec![0, 1, 2, 3]);
        let w = 4;
        // the singleton's own column is ineligible for itself
        let lone_row = 6;
        assert!(!table.eligible[lone_row * w + 3]);
        // but other probes can score against the singleton
        assert!(table.eligible[0 * w + 3]);
        // self-exclusion: probe 0 against identity 0 uses only sample 1
        let sims = cosine_matrix(&set, &set).unwrap();
        let n = set.records.len();
        assert_eq!(table.scores[0], sims[0 * n + 1]);
    }

    #[test]
    fn roc_endpoints_and_monotonicity() {
        let genuine = vec![0.9, 0.8, 0.85, 0.6];
        let impostor = vec![0.5, 0.4, 0.7, 0.3, 0.2, 0.65];
        let curve = roc_from_scores(&genuine, &impostor).unwrap();
        assert_eq!(curve.fmr.len(), ROC_GRID + 1);
        assert_eq!(curve.fmr[0], 0.0);
        assert_eq!(*curve.fmr.last().unwrap(), 1.0);
        assert_eq!(*curve.fnmr.last().unwrap(), 0.0);
        for i in 1..curve.fnmr.len() {
            assert!(curve.fnmr[i] <= curve.fnmr[i - 1]);
        }
        // at fmr target 0 the threshold is the top impostor (0.7): genuine
        // 0.6 misses
        assert!((curve.fnmr[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_gives_zero_eer_and_unit_auc() {
        let genuine = vec![0.9, 0.95, 0.85];
        let impostor = vec![0.1, 0.2, 0.15, 0.05];
        let curve = roc_from_scores(&genuine, &impostor).unwrap();
        assert_eq!(eer_of(&curve), 0.0);
        assert_eq!(auc_of(&curve), 1.0);
        assert_eq!(fnmr_at(&curve, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn reversed_scores_give_chance_or_worse() {
        let genuine = vec![0.1, 0.2, 0.15];
        let impostor = vec![0.9, 0.8, 0.85, 0.95];
        let curve = roc_from_scores(&genuine, &impostor).unwrap();
        assert!(eer_of(&curve) > 0.4);
        assert!(auc_of(&curve) < 0.6);
    }

    #[test]
    fn rank1_counts_correct_top_matches() {
        let set = clustered_set(4, 3, 8, 0.05, 9);
        let table = identity_scores(&set, Aggregation::Mean).unwrap();
        let r1 = rank1_of(&table).unwrap();
        assert_eq!(r1, 1.0);
    }

    #[test]
    fn rank1_tie_is_an_error() {
        // two identities with identical embeddings force an exact tie
        let e = vec![0.3, 0.4, 0.5];
        let mut records = Vec::new();
        for i in 0..2 {
            for s in 0..2 {
                records.push(EmbeddingRecord {
                    sample_id: format!("id{}_s{}", i, s),
                    identity: i,
                    subgroup: subgroup_for_identity(i),
                    embedding: e.clone(),
                });
            }
        }
        let set = EmbeddingSet::new(records).unwrap();
        let table = identity_scores(&set, Aggregation::Mean).unwrap();
        let err = rank1_of(&table).unwrap_err().to_string();
        assert!(err.contains("tie"), "{}", err);
    }

    #[test]
    fn evaluation_reports_all_sections() {
        let set = clustered_set(8, 3, 16, 0.3, 13);
        let ev = evaluate(&set, Aggregation::Mean).unwrap();
        assert_eq!(ev.report.num_probes, 24);
        assert_eq!(ev.report.num_identities, 8);
        assert_eq!(ev.report.identities_in_roc, 8);
        assert_eq!(ev.per_identity.len(), 8);
        // 8 identities spread over 4 subgroup cells, 2 each
        assert_eq!(ev.subgroups.len(), 4);
        assert!(ev.report.auc > 0.5);
        assert!(ev.report.eer < 0.5);
        assert!((0.0..=1.0).contains(&ev.report.rank1));
        let json = serde_json::to_string(&ev.report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ev.report);
    }

    #[test]
    fn embeddings_csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let set = clustered_set(3, 2, 5, 0.2, 17);
        set.write_csv(&path).unwrap();
        let back = EmbeddingSet::read_csv(&path).unwrap();
        assert_eq!(back.dim, 5);
        for (a, b) in set.records.iter().zip(&back.records) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.identity, b.identity);
            assert_eq!(a.subgroup, b.subgroup);
            let ab: Vec<u64> = a.embedding.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.embedding.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn roc_csv_has_grid_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roc.csv");
        let curve = roc_from_scores(&[0.9, 0.3], &[0.5, 0.1, 0.7]).unwrap();
        curve.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), ROC_GRID + 2);
        assert!(text.starts_with("fmr,fnmr\n"));
    }

    #[test]
    fn fnmr_at_rejects_off_grid_targets() {
        let curve = roc_from_scores(&[0.9], &[0.5, 0.1]).unwrap();
        assert!(fnmr_at(&curve, 0.01).is_ok());
        assert!(fnmr_at(&curve, 0.0105).is_err());
        assert!(fnmr_at(&curve, 1.5).is_err());
    }
}
