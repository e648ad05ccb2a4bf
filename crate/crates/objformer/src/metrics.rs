//! Confusion-matrix evaluation for binary and semantic change detection,
//! plus parameter/MAC reporting. Counts accumulate over the whole evaluation
//! set into one global matrix; partial matrices merge by addition.

use std::collections::BTreeMap;

use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::losses::BCD_BACKGROUND;
use crate::net::{MacBreakdown, ObjFormer, TokenCounts};
use crate::tensor::Element;
use serde::Serialize;

/// K x K counts; rows are the reference, columns the prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    counts: Vec<u64>,
    pub names: Vec<String>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(names: Vec<String>) -> Self {
        let k = names.len();
        ConfusionMatrix { k, counts: vec![0; k * k], names, ignored: 0 }
    }

    pub fn add(&mut self, reference: usize, prediction: usize) {
        self.counts[reference * self.k + prediction] += 1;
    }

    pub fn count(&self, reference: usize, prediction: usize) -> u64 {
        self.counts[reference * self.k + prediction]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Merge another matrix by addition; accumulation is associative and
    /// commutative, so parallel partials combine in any order.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
    }

    pub fn observed_agreement(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.k).map(|i| self.count(i, i)).sum();
        diag as f64 / total as f64
    }

    fn expected_agreement(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let t = total as f64;
        (0..self.k)
            .map(|i| {
                let row: u64 = (0..self.k).map(|j| self.count(i, j)).sum();
                let col: u64 = (0..self.k).map(|j| self.count(j, i)).sum();
                (row as f64 / t) * (col as f64 / t)
            })
            .sum()
    }
}

/// Cohen's kappa `(p_o - p_e) / (1 - p_e)`. Degenerate matrices (empty, or
/// chance agreement of one) report 0 and set the flag.
pub fn kappa(cm: &ConfusionMatrix) -> (f64, bool) {
    let total = cm.total();
    if total == 0 {
        return (0.0, true);
    }
    let po = cm.observed_agreement();
    let pe = cm.expected_agreement();
    if (1.0 - pe).abs() < 1e-15 {
        return (0.0, true);
    }
    ((po - pe) / (1.0 - pe), false)
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct BinaryMetrics {
    pub rec: f64,
    pub pre: f64,
    pub f1: f64,
    pub oa: f64,
    pub kc: f64,
    /// Set when any denominator was zero and the metric was pinned to 0.
    pub degenerate: bool,
}

/// Binary change metrics; changed is the positive class, background ignored.
pub fn binary_metrics(pred_bcd: &[u8], y_bcd: &[u8]) -> Result<BinaryMetrics> {
    let cm = binary_confusion(pred_bcd, y_bcd)?;
    Ok(binary_metrics_from(&cm))
}

pub fn binary_confusion(pred_bcd: &[u8], y_bcd: &[u8]) -> Result<ConfusionMatrix> {
    if pred_bcd.len() != y_bcd.len() {
        return Err(Error::shape("binary_metrics", "label length mismatch".to_string()));
    }
    let mut cm = ConfusionMatrix::new(vec!["unchanged".into(), "changed".into()]);
    for (&p, &r) in pred_bcd.iter().zip(y_bcd) {
        if r == BCD_BACKGROUND {
            cm.ignored += 1;
            continue;
        }
        cm.add(r as usize, (p != 0) as usize);
    }
    Ok(cm)
}

pub fn binary_metrics_from(cm: &ConfusionMatrix) -> BinaryMetrics {
    let tp = cm.count(1, 1) as f64;
    let tn = cm.count(0, 0) as f64;
    let fp = cm.count(0, 1) as f64;
    let fnn = cm.count(1, 0) as f64;
    let mut degenerate = false;
    let mut ratio = |num: f64, den: f64| {
        if den <= 0.0 {
            degenerate = true;
            0.0
        } else {
            num / den
        }
    };
    let rec = ratio(tp, tp + fnn);
    let pre = ratio(tp, tp + fp);
    let f1 = ratio(2.0 * pre * rec, pre + rec);
    let oa = ratio(tp + tn, tp + tn + fp + fnn);
    let (kc, kflag) = kappa(cm);
    BinaryMetrics { rec, pre, f1, oa, kc, degenerate: degenerate || kflag }
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct ScdMetrics {
    pub clf_oa: f64,
    pub clf_kc: f64,
    pub cd_kc: f64,
    pub tr_oa: f64,
    pub tr_kc: f64,
    pub degenerate: bool,
}

/// Accumulators behind the five SCD metrics, mergeable across samples.
#[derive(Debug, Clone)]
pub struct ScdAccumulator {
    /// Land-cover classes of the optical mapping, foreground only.
    pub clf: ConfusionMatrix,
    pub binary: ConfusionMatrix,
    /// Composite transition space: label 0 is "unchanged", the rest are
    /// (from, to) pairs discovered on the fly.
    tr_index: BTreeMap<(u8, u8), usize>,
    tr_pairs: Vec<(usize, usize)>,
}

impl ScdAccumulator {
    pub fn new(n_classes: usize) -> Self {
        ScdAccumulator {
            clf: ConfusionMatrix::new((1..=n_classes).map(|c| format!("class{c}")).collect()),
            binary: ConfusionMatrix::new(vec!["unchanged".into(), "changed".into()]),
            tr_index: BTreeMap::new(),
            tr_pairs: Vec::new(),
        }
    }

    fn tr_label(&mut self, changed: bool, from: u8, to: u8) -> usize {
        if !changed {
            return 0;
        }
        let next = self.tr_index.len() + 1;
        *self.tr_index.entry((from, to)).or_insert(next)
    }

    /// Accumulate one sample. `pred_lcm_opt` holds foreground class ids
    /// (1-based); background reference pixels are skipped entirely.
    pub fn add_sample(
        &mut self,
        pred_lcm_opt: &[u8],
        y_opt_full: &[u8],
        pred_bcd: &[u8],
        y_bcd: &[u8],
        y_osm: &[u8],
    ) -> Result<()> {
        let n = pred_lcm_opt.len();
        if [y_opt_full.len(), pred_bcd.len(), y_bcd.len(), y_osm.len()].iter().any(|&l| l != n) {
            return Err(Error::shape("scd_metrics", "label length mismatch".to_string()));
        }
        for p in 0..n {
            if y_bcd[p] == BCD_BACKGROUND || y_osm[p] == 0 {
                self.clf.ignored += 1;
                continue;
            }
            if y_opt_full[p] >= 1 && pred_lcm_opt[p] >= 1 {
                self.clf.add(y_opt_full[p] as usize - 1, pred_lcm_opt[p] as usize - 1);
            }
            self.binary.add(y_bcd[p] as usize, (pred_bcd[p] != 0) as usize);
            let r = self.tr_label(y_bcd[p] == 1, y_osm[p], y_opt_full[p]);
            let q = self.tr_label(pred_bcd[p] != 0, y_osm[p], pred_lcm_opt[p]);
            self.tr_pairs.push((r, q));
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ScdAccumulator) {
        self.clf.merge(&other.clf);
        self.binary.merge(&other.binary);
        for &(r, q) in &other.tr_pairs {
            // indices in `other` map through its own table; rebuild by pair
            let rp = other.pair_of(r);
            let qp = other.pair_of(q);
            let ri = match rp {
                None => 0,
                Some((f, t)) => self.tr_label(true, f, t),
            };
            let qi = match qp {
                None => 0,
                Some((f, t)) => self.tr_label(true, f, t),
            };
            self.tr_pairs.push((ri, qi));
        }
    }

    fn pair_of(&self, idx: usize) -> Option<(u8, u8)> {
        if idx == 0 {
            return None;
        }
        self.tr_index.iter().find(|(_, &v)| v == idx).map(|(&k, _)| k)
    }

    pub fn transition_confusion(&self) -> ConfusionMatrix {
        let k = self.tr_index.len() + 1;
        let mut names = vec!["unchanged".to_string()];
        let mut by_idx: Vec<(usize, (u8, u8))> =
            self.tr_index.iter().map(|(&p, &i)| (i, p)).collect();
        by_idx.sort_unstable();
        for (_, (f, t)) in by_idx {
            names.push(format!("{f}->{t}"));
        }
        let mut cm = ConfusionMatrix::new(names);
        let _ = k;
        for &(r, q) in &self.tr_pairs {
            cm.add(r, q);
        }
        cm
    }

    pub fn finish(&self) -> ScdMetrics {
        let (clf_kc, f1) = kappa(&self.clf);
        let (cd_kc, f2) = kappa(&self.binary);
        let tr = self.transition_confusion();
        let (tr_kc, f3) = kappa(&tr);
        ScdMetrics {
            clf_oa: self.clf.observed_agreement(),
            clf_kc,
            cd_kc,
            tr_oa: tr.observed_agreement(),
            tr_kc,
            degenerate: f1 || f2 || f3,
        }
    }
}

/// One-shot SCD metrics over a single sample.
pub fn scd_metrics(
    pred_lcm_opt: &[u8],
    y_opt_full: &[u8],
    pred_bcd: &[u8],
    y_bcd: &[u8],
    y_osm: &[u8],
    n_classes: usize,
) -> Result<ScdMetrics> {
    let mut acc = ScdAccumulator::new(n_classes);
    acc.add_sample(pred_lcm_opt, y_opt_full, pred_bcd, y_bcd, y_osm)?;
    Ok(acc.finish())
}

// ── complexity report ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct ComplexityRow {
    pub mode: String,
    pub complexity: String,
    pub macs: MacBreakdown,
    pub total_gmac: f64,
    pub score_gmac: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComplexityReport {
    pub params: usize,
    pub input: (usize, usize),
    pub tokens: (usize, usize),
    pub rows: Vec<ComplexityRow>,
}

impl ComplexityReport {
    pub fn row(&self, mode: &str) -> &ComplexityRow {
        self.rows.iter().find(|r| r.mode == mode).expect("unknown mode row")
    }

    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "params: {:.2}M  input: {}x{}  tokens: {} objects / {} instances\n",
            self.params as f64 / 1e6,
            self.input.0,
            self.input.1,
            self.tokens.0,
            self.tokens.1
        ));
        out.push_str(&format!(
            "{:<16} {:<22} {:>12} {:>12}\n",
            "mode", "complexity", "MACs (G)", "scores (G)"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:<22} {:>12.2} {:>12.2}\n",
                r.mode, r.complexity, r.total_gmac, r.score_gmac
            ));
        }
        out
    }
}

/// Compare the whole model's MACs across attention flavors at one input size.
pub fn complexity_report<E: Element>(
    model: &ObjFormer<E>,
    h: usize,
    w: usize,
    tokens: TokenCounts,
    sr_ratio: usize,
) -> ComplexityReport {
    let modes = [
        ("vanilla", "O(HW x HW)".to_string(), AttentionMode::Vanilla),
        (
            "spatial_reduction",
            format!("O(HW x HW/{}^2)", sr_ratio),
            AttentionMode::SpatialReduction(sr_ratio),
        ),
        ("object_guided", "O(N_obj x N_obj)".to_string(), AttentionMode::ObjectGuided),
    ];
    let rows = modes
        .into_iter()
        .map(|(name, complexity, mode)| {
            let macs = model.model_macs(h, w, mode, tokens);
            ComplexityRow {
                mode: name.to_string(),
                complexity,
                macs,
                total_gmac: macs.total() as f64 / 1e9,
                score_gmac: macs.score_macs() as f64 / 1e9,
            }
        })
        .collect();
    ComplexityReport {
        params: model.param_count(),
        input: (h, w),
        tokens: (tokens.objects, tokens.instances),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let y = [0u8, 1, 0, 1, 255, 0, 1, 1];
        let m = binary_metrics(&y, &y).unwrap();
        assert!(close(m.rec, 1.0) && close(m.pre, 1.0) && close(m.f1, 1.0));
        assert!(close(m.oa, 1.0) && close(m.kc, 1.0));
        assert!(!m.degenerate);
    }

    #[test]
    fn hand_worked_confusion_case() {
        // TN=40, FP=10, FN=5, TP=45
        let mut cm = ConfusionMatrix::new(vec!["unchanged".into(), "changed".into()]);
        for _ in 0..40 {
            cm.add(0, 0);
        }
        for _ in 0..10 {
            cm.add(0, 1);
        }
        for _ in 0..5 {
            cm.add(1, 0);
        }
        for _ in 0..45 {
            cm.add(1, 1);
        }
        let m = binary_metrics_from(&cm);
        assert!(close(m.oa, 0.85));
        assert!(close(m.rec, 0.90));
        assert!((m.pre - 45.0 / 55.0).abs() < 1e-12);
        assert!(close(m.kc, 0.70), "kc {}", m.kc);
    }

    #[test]
    fn constant_prediction_on_balanced_reference_has_zero_kappa() {
        let y: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let pred = vec![0u8; 100];
        let m = binary_metrics(&pred, &y).unwrap();
        assert!(close(m.kc, 0.0));
        assert!(m.degenerate); // precision has a zero denominator
    }

    #[test]
    fn kappa_diag_and_rank_one() {
        let mut diag = ConfusionMatrix::new(vec!["a".into(), "b".into(), "c".into()]);
        diag.add(0, 0);
        diag.add(1, 1);
        diag.add(2, 2);
        assert!(close(kappa(&diag).0, 1.0));

        // prediction independent of reference: rows proportional
        let mut r1 = ConfusionMatrix::new(vec!["a".into(), "b".into()]);
        for _ in 0..30 {
            r1.add(0, 0);
        }
        for _ in 0..10 {
            r1.add(0, 1);
        }
        for _ in 0..60 {
            r1.add(1, 0);
        }
        for _ in 0..20 {
            r1.add(1, 1);
        }
        assert!(close(kappa(&r1).0, 0.0));
    }

    #[test]
    fn kappa_invariant_under_simultaneous_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 4;
        let mut cm = ConfusionMatrix::new((0..k).map(|i| format!("c{i}")).collect());
        for _ in 0..500 {
            cm.add(rng.gen_range(0..k), rng.gen_range(0..k));
        }
        let perm = [2usize, 0, 3, 1];
        let mut pcm = ConfusionMatrix::new((0..k).map(|i| format!("c{i}")).collect());
        for i in 0..k {
            for j in 0..k {
                for _ in 0..cm.count(i, j) {
                    pcm.add(perm[i], perm[j]);
                }
            }
        }
        assert!(close(kappa(&cm).0, kappa(&pcm).0));
    }

    #[test]
    fn f1_lies_between_rec_and_pre() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let y: Vec<u8> = (0..200).map(|_| rng.gen_range(0..2)).collect();
            let p: Vec<u8> = (0..200).map(|_| rng.gen_range(0..2)).collect();
            let m = binary_metrics(&p, &y).unwrap();
            if m.degenerate {
                continue;
            }
            let lo = m.rec.min(m.pre);
            let hi = m.rec.max(m.pre);
            assert!(m.f1 >= lo - 1e-12 && m.f1 <= hi + 1e-12);
        }
    }

    #[test]
    fn scd_perfect_prediction_is_all_ones() {
        let y_osm = [1u8, 2, 3, 1, 2, 3, 0, 1];
        let y_full = [1u8, 2, 1, 3, 2, 3, 2, 1];
        let y_bcd: Vec<u8> = y_osm
            .iter()
            .zip(&y_full)
            .map(|(&o, &f)| if o == 0 { 255 } else { u8::from(o != f) })
            .collect();
        let m = scd_metrics(&y_full, &y_full, &y_bcd, &y_bcd, &y_osm, 3).unwrap();
        assert!(close(m.clf_oa, 1.0) && close(m.clf_kc, 1.0));
        assert!(close(m.cd_kc, 1.0));
        assert!(close(m.tr_oa, 1.0) && close(m.tr_kc, 1.0));
    }

    #[test]
    fn mapping_errors_on_changed_pixels_leave_cd_kc_perfect() {
        let y_osm = [1u8, 2, 1, 2, 1, 2];
        let y_full = [1u8, 2, 2, 1, 1, 2]; // pixels 2,3 changed
        let y_bcd = [0u8, 0, 1, 1, 0, 0];
        // binary prediction perfect; mapping wrong exactly on changed pixels
        let pred_lcm = [1u8, 2, 1, 2, 1, 2];
        let m = scd_metrics(&pred_lcm, &y_full, &y_bcd, &y_bcd, &y_osm, 3).unwrap();
        assert!(close(m.cd_kc, 1.0));
        assert!(m.clf_kc < 1.0);
        assert!(m.tr_kc < 1.0);
    }

    /// Exhaustive composite-label oracle sharing nothing with the accumulator.
    fn transition_oracle(
        pred_lcm: &[u8],
        y_full: &[u8],
        pred_bcd: &[u8],
        y_bcd: &[u8],
        y_osm: &[u8],
    ) -> (f64, f64) {
        #[derive(PartialEq, Eq, PartialOrd, Ord, Clone, Copy, Hash, Debug)]
        enum L {
            Unchanged,
            Pair(u8, u8),
        }
        let mut labels = std::collections::BTreeSet::new();
        let mut pairs = Vec::new();
        for p in 0..y_osm.len() {
            if y_bcd[p] == 255 || y_osm[p] == 0 {
                continue;
            }
            let r = if y_bcd[p] == 0 { L::Unchanged } else { L::Pair(y_osm[p], y_full[p]) };
            let q = if pred_bcd[p] == 0 { L::Unchanged } else { L::Pair(y_osm[p], pred_lcm[p]) };
            labels.insert(r);
            labels.insert(q);
            pairs.push((r, q));
        }
        let index: std::collections::BTreeMap<L, usize> =
            labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        let k = index.len();
        let mut cm = vec![0u64; k * k];
        for (r, q) in pairs {
            cm[index[&r] * k + index[&q]] += 1;
        }
        let total: u64 = cm.iter().sum();
        let po = (0..k).map(|i| cm[i * k + i]).sum::<u64>() as f64 / total as f64;
        let pe: f64 = (0..k)
            .map(|i| {
                let row: u64 = (0..k).map(|j| cm[i * k + j]).sum();
                let col: u64 = (0..k).map(|j| cm[j * k + i]).sum();
                (row as f64 / total as f64) * (col as f64 / total as f64)
            })
            .sum();
        (po, (po - pe) / (1.0 - pe))
    }

    #[test]
    fn transition_metrics_match_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = 300;
            let y_osm: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let y_full: Vec<u8> = (0..n).map(|_| rng.gen_range(1..4)).collect();
            let y_bcd: Vec<u8> = y_osm
                .iter()
                .zip(&y_full)
                .map(|(&o, &f)| if o == 0 { 255 } else { u8::from(o != f) })
                .collect();
            let pred_lcm: Vec<u8> = (0..n).map(|_| rng.gen_range(1..4)).collect();
            let pred_bcd: Vec<u8> = y_osm
                .iter()
                .zip(&pred_lcm)
                .map(|(&o, &f)| u8::from(o != 0 && o != f))
                .collect();
            let m = scd_metrics(&pred_lcm, &y_full, &pred_bcd, &y_bcd, &y_osm, 3).unwrap();
            let (po, kc) = transition_oracle(&pred_lcm, &y_full, &pred_bcd, &y_bcd, &y_osm);
            assert!((m.tr_oa - po).abs() <= 1e-12, "{} vs {}", m.tr_oa, po);
            assert!((m.tr_kc - kc).abs() <= 1e-12, "{} vs {}", m.tr_kc, kc);
        }
    }

    #[test]
    fn accumulator_merge_matches_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen = |rng: &mut ChaCha8Rng| {
            let n = 120;
            let y_osm: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let y_full: Vec<u8> = (0..n).map(|_| rng.gen_range(1..4)).collect();
            let y_bcd: Vec<u8> = y_osm
                .iter()
                .zip(&y_full)
                .map(|(&o, &f)| if o == 0 { 255 } else { u8::from(o != f) })
                .collect();
            let pred_lcm: Vec<u8> = (0..n).map(|_| rng.gen_range(1..4)).collect();
            let pred_bcd: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            (pred_lcm, y_full, pred_bcd, y_bcd, y_osm)
        };
        let a = gen(&mut rng);
        let b = gen(&mut rng);

        let mut whole = ScdAccumulator::new(3);
        whole.add_sample(&a.0, &a.1, &a.2, &a.3, &a.4).unwrap();
        whole.add_sample(&b.0, &b.1, &b.2, &b.3, &b.4).unwrap();

        let mut left = ScdAccumulator::new(3);
        left.add_sample(&a.0, &a.1, &a.2, &a.3, &a.4).unwrap();
        let mut right = ScdAccumulator::new(3);
        right.add_sample(&b.0, &b.1, &b.2, &b.3, &b.4).unwrap();
        left.merge(&right);

        let mw = whole.finish();
        let ml = left.finish();
        assert!(close(mw.tr_kc, ml.tr_kc) && close(mw.clf_kc, ml.clf_kc));
        assert!(close(mw.tr_oa, ml.tr_oa) && close(mw.cd_kc, ml.cd_kc));
    }

    #[test]
    fn complexity_report_has_three_rows() {
        use crate::net::{ModelConfig, Task};
        let model = ObjFormer::<f32>::new(ModelConfig::tiny(7), Task::Bcd, 0).unwrap();
        let rep = complexity_report(&model, 64, 64, TokenCounts { objects: 24, instances: 8 }, 4);
        assert_eq!(rep.rows.len(), 3);
        assert!(rep.row("vanilla").total_gmac > rep.row("object_guided").total_gmac);
        let table = rep.text_table();
        assert!(table.contains("object_guided"));
    }
}
