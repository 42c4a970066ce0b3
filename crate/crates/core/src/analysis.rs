//! Evaluation metrics: fooling ratios, dominance ratios, neural-collapse
//! covariance statistics, transfer matrices, and the redundancy sweep.

use serde::{Deserialize, Serialize};

use crate::attack::{craft_uap, AttackConfig, Perturbation};
use crate::dataset::{subsample_per_class, Image, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{Classifier, Model};
use crate::tensor::Tensor;

/// Class means, global mean, and the within/between-class covariance pair.
///
/// Conventions: the global mean is the unweighted mean of class means and
/// Σ_B the unweighted average over classes; Σ_W averages over all samples.
#[derive(Clone, Debug)]
pub struct CovarianceStats {
    /// `(class, count)` in ascending class order.
    pub counts: Vec<(usize, usize)>,
    /// One row per entry of `counts`, same order.
    pub class_means: Vec<Vec<f64>>,
    pub global_mean: Vec<f64>,
    pub sigma_w: Tensor,
    pub sigma_b: Tensor,
}

/// Within- and between-class covariance of `features[N,d]` grouped by
/// `labels`. Every class in `0..num_classes` must be present. Samples are
/// visited sorted by (class, original index) so the summation order, and
/// therefore the result, is bit-deterministic under input permutation.
pub fn covariance_stats(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
) -> Result<CovarianceStats> {
    let [n, d] = match features.dims() {
        [n, d] => [*n, *d],
        other => {
            return Err(Error::ShapeMismatch {
                op: "covariance_stats",
                lhs: other.to_vec(),
                rhs: vec![0, 0],
            })
        }
    };
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {n} feature rows",
            labels.len()
        )));
    }
    if n < num_classes {
        return Err(Error::InvalidArgument(format!(
            "need at least {num_classes} samples, got {n}"
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::ClassOutOfRange {
                class: l,
                num_classes,
            });
        }
        members[l].push(i);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        return Err(Error::MissingClass(empty));
    }

    let row = |i: usize| &features.data()[i * d..(i + 1) * d];
    // canonical in-class summation order (row content, bitwise) so sample
    // permutations cannot change the floating-point result
    for idxs in &mut members {
        idxs.sort_by(|&a, &b| {
            row(a)
                .iter()
                .map(|v| v.to_bits())
                .cmp(row(b).iter().map(|v| v.to_bits()))
        });
    }
    let mut class_means = Vec::with_capacity(num_classes);
    let mut counts = Vec::with_capacity(num_classes);
    for (c, idxs) in members.iter().enumerate() {
        let mut mean = vec![0.0; d];
        for &i in idxs {
            for (m, v) in mean.iter_mut().zip(row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= idxs.len() as f64;
        }
        counts.push((c, idxs.len()));
        class_means.push(mean);
    }

    let mut global_mean = vec![0.0; d];
    for mean in &class_means {
        for (g, m) in global_mean.iter_mut().zip(mean) {
            *g += m;
        }
    }
    for g in &mut global_mean {
        *g /= class_means.len() as f64;
    }

    // Σ_W = Ave over samples of (h − μ_c)(h − μ_c)ᵀ
    let mut sigma_w = vec![0.0; d * d];
    for (c, idxs) in members.iter().enumerate() {
        for &i in idxs {
            let dev: Vec<f64> = row(i)
                .iter()
                .zip(&class_means[c])
                .map(|(v, m)| v - m)
                .collect();
            accumulate_outer(&mut sigma_w, &dev, d);
        }
    }
    for v in &mut sigma_w {
        *v /= n as f64;
    }

    // Σ_B = Ave over classes of (μ_c − μ_G)(μ_c − μ_G)ᵀ
    let mut sigma_b = vec![0.0; d * d];
    for mean in &class_means {
        let dev: Vec<f64> = mean
            .iter()
            .zip(&global_mean)
            .map(|(m, g)| m - g)
            .collect();
        accumulate_outer(&mut sigma_b, &dev, d);
    }
    for v in &mut sigma_b {
        *v /= class_means.len() as f64;
    }

    Ok(CovarianceStats {
        counts,
        class_means,
        global_mean,
        sigma_w: Tensor::new(vec![d, d], sigma_w)?,
        sigma_b: Tensor::new(vec![d, d], sigma_b)?,
    })
}

fn accumulate_outer(acc: &mut [f64], dev: &[f64], d: usize) {
    for i in 0..d {
        let di = dev[i];
        for j in 0..d {
            acc[i * d + j] += di * dev[j];
        }
    }
}

/// The variability-collapse metric `Tr(Σ_W · Σ_B†)`.
///
/// Σ_B has rank at most K−1 < d, so the pseudoinverse goes through a
/// symmetric eigendecomposition with the rank-revealing cutoff
/// `tol = d · ε_machine · λ_max`; eigenvalues at or below the cutoff are
/// treated as zero.
pub fn nc_metric(stats: &CovarianceStats) -> Result<f64> {
    let d = stats.sigma_b.dims()[0];
    let sb = nalgebra::DMatrix::from_row_slice(d, d, stats.sigma_b.data());
    let eig = nalgebra::SymmetricEigen::new(sb);
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if lambda_max <= 0.0 {
        return Err(Error::DegenerateCovariance);
    }
    let tol = d as f64 * f64::EPSILON * lambda_max;
    let sw = &stats.sigma_w;
    let mut trace = 0.0;
    let mut kept = 0;
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= tol {
            continue;
        }
        kept += 1;
        let v = eig.eigenvectors.column(idx);
        // vᵀ Σ_W v / λ
        let mut quad = 0.0;
        for i in 0..d {
            let mut rowdot = 0.0;
            for j in 0..d {
                rowdot += sw.data()[i * d + j] * v[j];
            }
            quad += v[i] * rowdot;
        }
        trace += quad / lambda;
    }
    if kept == 0 {
        return Err(Error::DegenerateCovariance);
    }
    debug_assert!(trace >= -1e-10, "trace of PSD product went negative: {trace}");
    Ok(trace)
}

/// Fraction of samples whose prediction changes under the perturbation.
/// The denominator is all samples, with no correctness filter.
pub fn fooling_ratio<C: Classifier>(
    model: &C,
    ds: &LabeledDataset,
    p: &Perturbation,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let clean = model.predict_images(&ds.images)?;
    let adv_images: Vec<Image> = ds
        .images
        .iter()
        .map(|img| p.apply(img))
        .collect::<Result<_>>()?;
    let adv = model.predict_images(&adv_images)?;
    let flipped = clean.iter().zip(&adv).filter(|(a, b)| a != b).count();
    Ok(flipped as f64 / ds.len() as f64)
}

/// Fraction of perturbed samples predicted exactly as `target`.
pub fn targeted_fooling_ratio<C: Classifier>(
    model: &C,
    ds: &LabeledDataset,
    p: &Perturbation,
    target: usize,
) -> Result<f64> {
    if target >= model.num_classes() {
        return Err(Error::ClassOutOfRange {
            class: target,
            num_classes: model.num_classes(),
        });
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let adv_images: Vec<Image> = ds
        .images
        .iter()
        .map(|img| p.apply(img))
        .collect::<Result<_>>()?;
    let adv = model.predict_images(&adv_images)?;
    Ok(adv.iter().filter(|&&c| c == target).count() as f64 / ds.len() as f64)
}

/// Histogram of predictions over `0..num_classes`, sorted by
/// (count descending, class ascending).
fn sorted_histogram(predictions: &[usize], num_classes: usize) -> Vec<(usize, usize)> {
    let mut counts = vec![0usize; num_classes];
    for &p in predictions {
        counts[p] += 1;
    }
    let mut hist: Vec<(usize, usize)> = counts.into_iter().enumerate().collect();
    hist.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    hist
}

/// Share of predictions falling into the `k` most frequent classes.
/// Frequency ties break to the lowest class index.
pub fn dominance_ratio(predictions: &[usize], num_classes: usize, k: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if k < 1 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if let Some(&bad) = predictions.iter().find(|&&p| p >= num_classes) {
        return Err(Error::ClassOutOfRange {
            class: bad,
            num_classes,
        });
    }
    let hist = sorted_histogram(predictions, num_classes);
    let top: usize = hist.iter().take(k).map(|(_, c)| c).sum();
    Ok(top as f64 / predictions.len() as f64)
}

/// Classify the perturbation itself (rendered on a mid-gray canvas) and
/// report its rank in the perturbed-prediction histogram (1 = most
/// frequent; ties break to the lowest class index).
pub fn dominant_class_check<C: Classifier>(
    model: &C,
    ds: &LabeledDataset,
    p: &Perturbation,
) -> Result<(usize, usize)> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let canvas = Tensor::filled(p.delta().dims(), 0.5)
        .add(p.delta())?
        .clamp(0.0, 1.0)?;
    let c_delta = model.predict_images(&[Image::new(canvas)?])?[0];

    let adv_images: Vec<Image> = ds
        .images
        .iter()
        .map(|img| p.apply(img))
        .collect::<Result<_>>()?;
    let preds = model.predict_images(&adv_images)?;
    let hist = sorted_histogram(&preds, model.num_classes());
    let rank = hist
        .iter()
        .position(|&(c, _)| c == c_delta)
        .expect("every class appears in the histogram")
        + 1;
    Ok((c_delta, rank))
}

/// Features and predictions of every (optionally perturbed) sample.
fn features_and_predictions(
    model: &Model,
    ds: &LabeledDataset,
    p: Option<&Perturbation>,
) -> Result<(Tensor, Vec<usize>)> {
    let images: Vec<Image> = match p {
        Some(p) => ds.images.iter().map(|img| p.apply(img)).collect::<Result<_>>()?,
        None => ds.images.clone(),
    };
    let d = model.feature_dim();
    let mut feats = Vec::with_capacity(ds.len() * d);
    let mut preds = Vec::with_capacity(ds.len());
    for chunk in images.chunks(64) {
        let mut data = Vec::new();
        for img in chunk {
            data.extend_from_slice(img.pixels().data());
        }
        let [c, h, w] = chunk[0].dims();
        let x = Tensor::new(vec![chunk.len(), c, h, w], data)?;
        let (logits, features) = model.forward_with_features(&x)?;
        feats.extend_from_slice(features.data());
        preds.extend(crate::models::argmax_rows(&logits));
    }
    Ok((Tensor::new(vec![ds.len(), d], feats)?, preds))
}

/// Collapse metric over a feature set grouped by `groups`, keeping only
/// classes with at least 2 members. Fewer than 2 surviving classes is an
/// error.
fn grouped_nc_metric(features: &Tensor, groups: &[usize], num_classes: usize) -> Result<f64> {
    let d = features.dims()[1];
    let mut counts = vec![0usize; num_classes];
    for &g in groups {
        counts[g] += 1;
    }
    let survivors: Vec<usize> = (0..num_classes).filter(|&c| counts[c] >= 2).collect();
    if survivors.len() < 2 {
        return Err(Error::TooFewClasses);
    }
    let relabel: Vec<Option<usize>> = {
        let mut map = vec![None; num_classes];
        for (new, &c) in survivors.iter().enumerate() {
            map[c] = Some(new);
        }
        map
    };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, &g) in groups.iter().enumerate() {
        if let Some(new) = relabel[g] {
            data.extend_from_slice(&features.data()[i * d..(i + 1) * d]);
            labels.push(new);
        }
    }
    let kept = Tensor::new(vec![labels.len(), d], data)?;
    let stats = covariance_stats(&kept, &labels, survivors.len())?;
    nc_metric(&stats)
}

/// Collapse metric before and after perturbation. The clean metric groups
/// clean features by ground-truth labels; the perturbed metric groups
/// perturbed features by the model's prediction on the perturbed input.
pub fn nc_report(
    model: &Model,
    ds: &LabeledDataset,
    p: Option<&Perturbation>,
) -> Result<(f64, f64)> {
    ds.validate()?;
    let (clean_feats, _) = features_and_predictions(model, ds, None)?;
    let metric_clean = grouped_nc_metric(&clean_feats, &ds.labels, ds.num_classes)?;
    let (adv_feats, adv_preds) = features_and_predictions(model, ds, p)?;
    let metric_perturbed = grouped_nc_metric(&adv_feats, &adv_preds, ds.num_classes)?;
    Ok((metric_clean, metric_perturbed))
}

/// Entry `(i,j)` is the fooling ratio of perturbation `i` against model
/// `j`: rows are surrogates, columns are victims.
pub fn transfer_matrix(
    models: &[&Model],
    perturbations: &[&Perturbation],
    ds: &LabeledDataset,
) -> Result<Vec<Vec<f64>>> {
    let mut matrix = Vec::with_capacity(perturbations.len());
    for p in perturbations {
        let mut row = Vec::with_capacity(models.len());
        for m in models {
            row.push(fooling_ratio(*m, ds, p)?);
        }
        matrix.push(row);
    }
    Ok(matrix)
}

#[derive(Clone, Debug, Serialize)]
pub struct RedundancyRow {
    pub per_class: usize,
    pub fooling_ratio: f64,
    pub ratio_to_full: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RedundancySweep {
    pub full_fooling_ratio: f64,
    pub rows: Vec<RedundancyRow>,
}

/// Craft on per-class subsets of descending size (no augmentation) and
/// report the test-split fooling ratio of each, relative to the full-set
/// run under the same attack configuration.
pub fn redundancy_sweep(
    model: &Model,
    train: &LabeledDataset,
    test: &LabeledDataset,
    per_class_counts: &[usize],
    cfg: &AttackConfig,
    subsample_seed: u64,
) -> Result<RedundancySweep> {
    if per_class_counts.is_empty() {
        return Err(Error::InvalidArgument("no subset sizes given".into()));
    }
    if per_class_counts.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::InvalidArgument(
            "subset sizes must be strictly descending".into(),
        ));
    }
    let (full_uap, _) = craft_uap(model, train, cfg)?;
    let full_fr = fooling_ratio(model, test, &full_uap)?;
    let mut rows = Vec::with_capacity(per_class_counts.len());
    for &count in per_class_counts {
        let subset = subsample_per_class(train, count, subsample_seed)?;
        let (uap, _) = craft_uap(model, &subset, cfg)?;
        let fr = fooling_ratio(model, test, &uap)?;
        rows.push(RedundancyRow {
            per_class: count,
            fooling_ratio: fr,
            ratio_to_full: fr / full_fr,
        });
    }
    Ok(RedundancySweep {
        full_fooling_ratio: full_fr,
        rows,
    })
}

/// Everything the evaluation pipeline measures for one (model,
/// perturbation, dataset) triple. Serialized as a JSON document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub perturbation_id: String,
    pub dataset_id: String,
    pub fooling_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targeted_fooling_ratio: Option<f64>,
    pub dominance_d1: f64,
    pub dominance_d3: f64,
    pub dominance_d5: f64,
    pub uap_predicted_class: usize,
    pub uap_class_rank: usize,
    pub nc_metric_clean: f64,
    pub nc_metric_perturbed: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let ratios = [
            self.fooling_ratio,
            self.targeted_fooling_ratio.unwrap_or(0.0),
            self.dominance_d1,
            self.dominance_d3,
            self.dominance_d5,
        ];
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidArgument("ratio outside [0,1]".into()));
        }
        if self.dominance_d1 > self.dominance_d3 || self.dominance_d3 > self.dominance_d5 {
            return Err(Error::InvalidArgument(
                "dominance ratios must be monotone in k".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<EvalReport> {
        serde_json::from_str(s)
            .map_err(|e| Error::MalformedMetadata(format!("bad report JSON: {e}")))
    }
}

/// Run the full metric battery for one perturbation.
pub fn evaluate(model: &Model, ds: &LabeledDataset, p: &Perturbation) -> Result<EvalReport> {
    let fr = fooling_ratio(model, ds, p)?;
    let tfr = match p.mode {
        crate::attack::AttackMode::Targeted(t) => {
            Some(targeted_fooling_ratio(model, ds, p, t)?)
        }
        crate::attack::AttackMode::Untargeted => None,
    };
    let adv_images: Vec<Image> = ds
        .images
        .iter()
        .map(|img| p.apply(img))
        .collect::<Result<_>>()?;
    let preds = model.predict_images(&adv_images)?;
    let k = model.num_classes();
    let (c_delta, rank) = dominant_class_check(model, ds, p)?;
    let (nc_clean, nc_adv) = nc_report(model, ds, Some(p))?;
    let report = EvalReport {
        model_id: model.id(),
        perturbation_id: p.id(),
        dataset_id: ds.id(),
        fooling_ratio: fr,
        targeted_fooling_ratio: tfr,
        dominance_d1: dominance_ratio(&preds, k, 1)?,
        dominance_d3: dominance_ratio(&preds, k, 3)?,
        dominance_d5: dominance_ratio(&preds, k, 5)?,
        uap_predicted_class: c_delta,
        uap_class_rank: rank,
        nc_metric_clean: nc_clean,
        nc_metric_perturbed: nc_adv,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{AttackMethod, AttackMode};
    use crate::dataset::Split;

    /// Classifier that ignores pixels and predicts a constant class.
    struct ConstStub {
        class: usize,
        k: usize,
    }

    impl Classifier for ConstStub {
        fn num_classes(&self) -> usize {
            self.k
        }
        fn predict_images(&self, images: &[Image]) -> Result<Vec<usize>> {
            Ok(vec![self.class; images.len()])
        }
    }

    /// Thresholds the mean pixel: prediction flips when the mean crosses 0.5.
    struct MeanStub;

    impl Classifier for MeanStub {
        fn num_classes(&self) -> usize {
            2
        }
        fn predict_images(&self, images: &[Image]) -> Result<Vec<usize>> {
            Ok(images
                .iter()
                .map(|img| {
                    let m: f64 = img.pixels().data().iter().sum::<f64>()
                        / img.pixels().numel() as f64;
                    usize::from(m > 0.5)
                })
                .collect())
        }
    }

    fn flat_image(v: f64) -> Image {
        Image::new(Tensor::filled(&[1, 8, 8], v)).unwrap()
    }

    fn two_sample_ds() -> LabeledDataset {
        LabeledDataset {
            images: vec![flat_image(0.46), flat_image(0.10)],
            labels: vec![0, 0],
            num_classes: 2,
            split: Split::Test,
            seed: 0,
        }
    }

    fn pert(v: f64, xi: f64) -> Perturbation {
        Perturbation::new(
            Tensor::filled(&[1, 8, 8], v),
            xi,
            AttackMode::Untargeted,
            AttackMethod::Fg,
            "stub".into(),
            0,
        )
        .unwrap()
    }

    #[test]
    fn fooling_ratio_zero_delta_and_stub_cases() {
        let ds = two_sample_ds();
        assert_eq!(fooling_ratio(&MeanStub, &ds, &pert(0.0, 0.1)).unwrap(), 0.0);
        // constant model is never fooled
        let stub = ConstStub { class: 1, k: 2 };
        assert_eq!(fooling_ratio(&stub, &ds, &pert(0.1, 0.1)).unwrap(), 0.0);
        // +0.1 pushes 0.46 → 0.56 over the threshold but 0.10 stays below
        assert_eq!(fooling_ratio(&MeanStub, &ds, &pert(0.1, 0.1)).unwrap(), 0.5);
    }

    #[test]
    fn targeted_fooling_ratio_stub_cases() {
        let ds = two_sample_ds();
        let hit = ConstStub { class: 1, k: 2 };
        let miss = ConstStub { class: 0, k: 2 };
        let p = pert(0.0, 0.1);
        assert_eq!(targeted_fooling_ratio(&hit, &ds, &p, 1).unwrap(), 1.0);
        assert_eq!(targeted_fooling_ratio(&miss, &ds, &p, 1).unwrap(), 0.0);
        assert!(targeted_fooling_ratio(&hit, &ds, &p, 7).is_err());

        // TFR ≤ FR + clean fraction already at the target
        let p = pert(0.1, 0.1);
        let tfr = targeted_fooling_ratio(&MeanStub, &ds, &p, 1).unwrap();
        let fr = fooling_ratio(&MeanStub, &ds, &p).unwrap();
        let clean = MeanStub.predict_images(&ds.images).unwrap();
        let clean_frac = clean.iter().filter(|&&c| c == 1).count() as f64 / 2.0;
        assert!(tfr <= 1.0);
        assert!(tfr <= fr + clean_frac + 1e-12);
    }

    #[test]
    fn dominance_ratio_hand_cases() {
        assert_eq!(dominance_ratio(&[2, 2, 2, 2], 4, 1).unwrap(), 1.0);
        // uniform over 4 classes, k=2 → 0.5
        assert_eq!(dominance_ratio(&[0, 1, 2, 3], 4, 2).unwrap(), 0.5);
        // class 2 count 3, then tie {0:1, 1:1} broken to class 0
        let r = dominance_ratio(&[2, 2, 2, 1, 0], 3, 2).unwrap();
        assert!((r - 0.8).abs() < 1e-15);
        assert!(dominance_ratio(&[], 3, 1).is_err());
    }

    #[test]
    fn covariance_hand_case_1d() {
        // class A {1,3}, class B {5,7} → μ_A=2, μ_B=6, μ_G=4, Σ_W=1, Σ_B=4
        let feats = Tensor::new(vec![4, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let stats = covariance_stats(&feats, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(stats.class_means, vec![vec![2.0], vec![6.0]]);
        assert_eq!(stats.global_mean, vec![4.0]);
        assert_eq!(stats.sigma_w.data(), &[1.0]);
        assert_eq!(stats.sigma_b.data(), &[4.0]);
        let metric = nc_metric(&stats).unwrap();
        assert!((metric - 0.25).abs() < 1e-15);
    }

    #[test]
    fn covariance_collapse_limit_and_missing_class() {
        // every feature at its class mean → Σ_W = 0 → metric 0
        let feats = Tensor::new(vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 2.0]).unwrap();
        let stats = covariance_stats(&feats, &[0, 0, 1, 1], 2).unwrap();
        assert!(stats.sigma_w.data().iter().all(|&v| v == 0.0));
        assert_eq!(nc_metric(&stats).unwrap(), 0.0);

        let err = covariance_stats(&feats, &[0, 0, 0, 0], 2).unwrap_err();
        assert!(matches!(err, Error::MissingClass(1)));
    }

    #[test]
    fn covariance_permutation_invariance() {
        let feats = Tensor::new(
            vec![5, 2],
            vec![0.1, 0.2, 1.5, -0.5, 0.7, 0.9, -1.0, 0.3, 2.0, 2.0],
        )
        .unwrap();
        let labels = [0, 1, 0, 1, 0];
        let a = covariance_stats(&feats, &labels, 2).unwrap();
        // permute sample order
        let perm = [4usize, 2, 0, 3, 1];
        let mut pdata = Vec::new();
        let mut plabels = Vec::new();
        for &i in &perm {
            pdata.extend_from_slice(&feats.data()[i * 2..(i + 1) * 2]);
            plabels.push(labels[i]);
        }
        let pfeats = Tensor::new(vec![5, 2], pdata).unwrap();
        let b = covariance_stats(&pfeats, &plabels, 2).unwrap();
        assert!(a.sigma_w.bit_eq(&b.sigma_w));
        assert!(a.sigma_b.bit_eq(&b.sigma_b));
    }

    #[test]
    fn nc_metric_degenerate_and_scale_invariance() {
        // Σ_B identically zero → undefined
        let feats = Tensor::new(vec![4, 2], vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, 0.0]).unwrap();
        let stats = covariance_stats(&feats, &[0, 0, 1, 1], 2).unwrap();
        assert!(matches!(nc_metric(&stats), Err(Error::DegenerateCovariance)));

        // positive scaling of all features leaves the metric unchanged
        let data = vec![
            0.3, 1.2, -0.4, 0.2, 0.9, 1.1, 2.0, -0.7, 1.4, 0.5, -0.2, 0.8,
        ];
        let feats = Tensor::new(vec![6, 2], data.clone()).unwrap();
        let labels = [0, 0, 1, 1, 2, 2];
        let m1 = nc_metric(&covariance_stats(&feats, &labels, 3).unwrap()).unwrap();
        let scaled = Tensor::new(vec![6, 2], data.iter().map(|v| v * 3.7).collect()).unwrap();
        let m2 = nc_metric(&covariance_stats(&scaled, &labels, 3).unwrap()).unwrap();
        assert!((m1 - m2).abs() < 1e-8 * m1.abs().max(1.0));
    }

    #[test]
    fn nc_metric_rotation_invariance() {
        // features living in a 2-D subspace of d=3 keep Σ_B rank-deficient,
        // exercising the pseudoinverse cutoff under rotation
        let mut data = Vec::new();
        let raw = [
            (0usize, [0.3, 1.2]),
            (0, [0.5, 0.9]),
            (1, [2.0, -0.7]),
            (1, [1.7, -0.4]),
            (2, [-1.0, 0.8]),
            (2, [-1.3, 0.5]),
        ];
        let labels: Vec<usize> = raw.iter().map(|(l, _)| *l).collect();
        for (_, f) in &raw {
            data.extend_from_slice(&[f[0], f[1], 0.0]);
        }
        let feats = Tensor::new(vec![6, 3], data.clone()).unwrap();
        let m1 = nc_metric(&covariance_stats(&feats, &labels, 3).unwrap()).unwrap();

        // a fixed orthogonal rotation (Householder-like mix of all 3 axes)
        let q = [
            [2.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0],
            [2.0 / 3.0, 2.0 / 3.0, -1.0 / 3.0],
            [-1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0],
        ];
        let mut rotated = Vec::new();
        for row in data.chunks(3) {
            for qrow in &q {
                rotated.push(row[0] * qrow[0] + row[1] * qrow[1] + row[2] * qrow[2]);
            }
        }
        let rfeats = Tensor::new(vec![6, 3], rotated).unwrap();
        let m2 = nc_metric(&covariance_stats(&rfeats, &labels, 3).unwrap()).unwrap();
        assert!(
            (m1 - m2).abs() < 1e-8 * m1.abs().max(1.0),
            "rotation changed the metric: {m1} vs {m2}"
        );
    }

    #[test]
    fn transfer_diagonal_matches_standalone_fr() {
        let (train_ds, test_ds) = crate::dataset::generate_synthetic(5, 2, 8, 4, 12).unwrap();
        let mut m = Model::build_for_input(crate::models::Arch::Mlp, 2, 3, [1, 12, 12]).unwrap();
        let tcfg = crate::trainer::TrainConfig {
            epochs: 8,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 1,
            shuffle: true,
        };
        crate::trainer::train(&mut m, &train_ds, None, &tcfg).unwrap();
        let acfg = crate::attack::AttackConfig {
            batch_size: 8,
            epochs: 2,
            learning_rate: 0.02,
            xi: 0.05,
            mode: AttackMode::Untargeted,
            seed: 9,
        };
        let (uap, _) = crate::attack::craft_uap(&m, &train_ds, &acfg).unwrap();
        let matrix = transfer_matrix(&[&m], &[&uap], &test_ds).unwrap();
        let standalone = fooling_ratio(&m, &test_ds, &uap).unwrap();
        assert_eq!(matrix[0][0], standalone);
    }

    #[test]
    fn dominant_class_check_stub() {
        let ds = two_sample_ds();
        let stub = ConstStub { class: 1, k: 4 };
        let (c, rank) = dominant_class_check(&stub, &ds, &pert(0.01, 0.1)).unwrap();
        assert_eq!(c, 1);
        assert_eq!(rank, 1);
        assert!((1..=4).contains(&rank));
    }

    #[test]
    fn transfer_matrix_zero_perturbations() {
        let (train_ds, _) = crate::dataset::generate_synthetic(5, 2, 4, 2, 12).unwrap();
        let m1 = Model::build_for_input(crate::models::Arch::Mlp, 2, 1, [1, 12, 12]).unwrap();
        let m2 = Model::build_for_input(crate::models::Arch::Mlp, 2, 2, [1, 12, 12]).unwrap();
        let zero = pert_for_side12();
        let matrix = transfer_matrix(&[&m1, &m2], &[&zero, &zero], &train_ds).unwrap();
        assert_eq!(matrix, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        // diagonal equals the standalone white-box value by definition
        assert_eq!(matrix[0][0], fooling_ratio(&m1, &train_ds, &zero).unwrap());
    }

    fn pert_for_side12() -> Perturbation {
        Perturbation::new(
            Tensor::zeros(&[1, 12, 12]),
            0.1,
            AttackMode::Untargeted,
            AttackMethod::Fg,
            "stub".into(),
            0,
        )
        .unwrap()
    }

    #[test]
    fn report_validation_rules() {
        let mut r = EvalReport {
            model_id: "m".into(),
            perturbation_id: "p".into(),
            dataset_id: "d".into(),
            fooling_ratio: 0.9,
            targeted_fooling_ratio: None,
            dominance_d1: 0.5,
            dominance_d3: 0.7,
            dominance_d5: 0.8,
            uap_predicted_class: 1,
            uap_class_rank: 1,
            nc_metric_clean: 0.2,
            nc_metric_perturbed: 0.1,
        };
        r.validate().unwrap();
        let json = r.to_json();
        let back = EvalReport::from_json(&json).unwrap();
        assert_eq!(back.fooling_ratio, r.fooling_ratio);
        r.dominance_d1 = 0.9;
        assert!(r.validate().is_err());
    }
}
