//! Twelve-measure scoring of binarized segmentation masks.
//!
//! With `P = tp + fn`, `N = tn + fp`:
//!
//! ```text
//! accuracy     (tp + tn) / total
//! sensitivity  tp / (tp + fn)          fnr = 1 - sensitivity
//! specificity  tn / (tn + fp)          fpr = 1 - specificity
//! precision    tp / (tp + fp)          fdr = 1 - precision
//! npv          tn / (tn + fn)
//! f1           2tp / (2tp + fp + fn)
//! mcc          (tp*tn - fp*fn) / sqrt((tp+fp)(tp+fn)(tn+fp)(tn+fn))
//! informedness sensitivity + specificity - 1
//! markedness   precision + npv - 1
//! ```
//!
//! A zero denominator gives 0 for the affected measure and sets its flag.
//! Measures derived from a flagged one inherit the flag.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("prediction has {prediction} pixels, truth has {truth}")]
    ShapeMismatch { prediction: usize, truth: usize },
    #[error("threshold {0} is outside [0, 1]")]
    Threshold(String),
    #[error("confusion counts are all zero")]
    EmptyCounts,
    #[error("no reports to aggregate")]
    EmptyList,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts::new(self.tp + o.tp, self.tn + o.tn, self.fp + o.fp, self.fn_ + o.fn_)
    }
}

/// A pixel is predicted positive iff its value is at least `threshold`;
/// a truth pixel is positive iff nonzero.
pub fn confusion_from_masks<P: Copy + Into<f64>>(
    prediction: &[P],
    truth: &[u8],
    threshold: f64,
) -> Result<ConfusionCounts, MetricsError> {
    if prediction.len() != truth.len() {
        return Err(MetricsError::ShapeMismatch {
            prediction: prediction.len(),
            truth: truth.len(),
        });
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MetricsError::Threshold(threshold.to_string()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in prediction.iter().zip(truth) {
        match (p.into() >= threshold, t != 0) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Accuracy,
    Sensitivity,
    Specificity,
    Precision,
    Npv,
    Fpr,
    Fnr,
    Fdr,
    F1,
    Mcc,
    Informedness,
    Markedness,
}

impl Metric {
    pub const ALL: [Metric; 12] = [
        Metric::Accuracy,
        Metric::Sensitivity,
        Metric::Specificity,
        Metric::Precision,
        Metric::Npv,
        Metric::Fpr,
        Metric::Fnr,
        Metric::Fdr,
        Metric::F1,
        Metric::Mcc,
        Metric::Informedness,
        Metric::Markedness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
            Metric::Precision => "precision",
            Metric::Npv => "npv",
            Metric::Fpr => "fpr",
            Metric::Fnr => "fnr",
            Metric::Fdr => "fdr",
            Metric::F1 => "f1",
            Metric::Mcc => "mcc",
            Metric::Informedness => "informedness",
            Metric::Markedness => "markedness",
        }
    }

    /// Valid value range, used for histogram bins.
    pub fn range(self) -> (f64, f64) {
        match self {
            Metric::Mcc | Metric::Informedness | Metric::Markedness => (-1.0, 1.0),
            _ => (0.0, 1.0),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// The twelve measures for one image (or one pooled count).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub counts: ConfusionCounts,
    pub values: [f64; 12],
    /// Set where a zero denominator forced the value to 0.
    pub zero_denominator: [bool; 12],
}

impl MetricReport {
    pub fn get(&self, m: Metric) -> f64 {
        self.values[m.index()]
    }

    pub fn flagged(&self, m: Metric) -> bool {
        self.zero_denominator[m.index()]
    }

    pub fn accuracy(&self) -> f64 {
        self.get(Metric::Accuracy)
    }

    pub fn sensitivity(&self) -> f64 {
        self.get(Metric::Sensitivity)
    }

    pub fn specificity(&self) -> f64 {
        self.get(Metric::Specificity)
    }

    pub fn precision(&self) -> f64 {
        self.get(Metric::Precision)
    }

    pub fn npv(&self) -> f64 {
        self.get(Metric::Npv)
    }

    pub fn fpr(&self) -> f64 {
        self.get(Metric::Fpr)
    }

    pub fn fnr(&self) -> f64 {
        self.get(Metric::Fnr)
    }

    pub fn fdr(&self) -> f64 {
        self.get(Metric::Fdr)
    }

    pub fn f1(&self) -> f64 {
        self.get(Metric::F1)
    }

    pub fn mcc(&self) -> f64 {
        self.get(Metric::Mcc)
    }

    pub fn informedness(&self) -> f64 {
        self.get(Metric::Informedness)
    }

    pub fn markedness(&self) -> f64 {
        self.get(Metric::Markedness)
    }
}

fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

pub fn compute_metrics(c: ConfusionCounts) -> Result<MetricReport, MetricsError> {
    if c.total() == 0 {
        return Err(MetricsError::EmptyCounts);
    }
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let accuracy = ratio(tp + tn, tp + tn + fp + fn_);
    let sens = ratio(tp, tp + fn_);
    let spec = ratio(tn, tn + fp);
    let prec = ratio(tp, tp + fp);
    let npv = ratio(tn, tn + fn_);
    let complement = |(v, z): (f64, bool)| if z { (0.0, true) } else { (1.0 - v, false) };
    let f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn_);
    let mcc = ratio(
        tp * tn - fp * fn_,
        ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt(),
    );
    let sum_less_one = |a: (f64, bool), b: (f64, bool)| {
        if a.1 || b.1 {
            (0.0, true)
        } else {
            (a.0 + b.0 - 1.0, false)
        }
    };
    let all = [
        accuracy,
        sens,
        spec,
        prec,
        npv,
        complement(spec),
        complement(sens),
        complement(prec),
        f1,
        mcc,
        sum_less_one(sens, spec),
        sum_less_one(prec, npv),
    ];
    Ok(MetricReport {
        counts: c,
        values: all.map(|(v, _)| v),
        zero_denominator: all.map(|(_, z)| z),
    })
}

pub const HISTOGRAM_BINS: usize = 20;

/// Twenty equal bins over a measure's valid range; the top edge falls in
/// the last bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub low: f64,
    pub high: f64,
    pub counts: [usize; HISTOGRAM_BINS],
}

impl Histogram {
    pub fn new(metric: Metric, values: impl IntoIterator<Item = f64>) -> Self {
        let (low, high) = metric.range();
        let mut counts = [0; HISTOGRAM_BINS];
        for v in values {
            let t = ((v - low) / (high - low) * HISTOGRAM_BINS as f64).floor();
            let bin = (t.max(0.0) as usize).min(HISTOGRAM_BINS - 1);
            counts[bin] += 1;
        }
        Histogram { low, high, counts }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub per_image: Vec<MetricReport>,
    pub mean: [f64; 12],
    pub min: [f64; 12],
    pub max: [f64; 12],
    pub zero_denominator_count: [usize; 12],
    pub histograms: Vec<Histogram>,
}

impl AggregateReport {
    pub fn mean_of(&self, m: Metric) -> f64 {
        self.mean[m.index()]
    }

    /// `metric,mean,min,max,zero_denominator_count`, one row per measure.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,mean,min,max,zero_denominator_count\n");
        for m in Metric::ALL {
            let i = m.index();
            let _ = writeln!(
                out,
                "{},{:.9},{:.9},{:.9},{}",
                m.name(),
                self.mean[i],
                self.min[i],
                self.max[i],
                self.zero_denominator_count[i]
            );
        }
        out
    }

    /// One row per image: index, counts, then the twelve measures.
    pub fn per_image_csv(&self) -> String {
        let mut out = String::from("image,tp,tn,fp,fn");
        for m in Metric::ALL {
            out.push(',');
            out.push_str(m.name());
        }
        out.push('\n');
        for (i, r) in self.per_image.iter().enumerate() {
            let c = r.counts;
            let _ = write!(out, "{i},{},{},{},{}", c.tp, c.tn, c.fp, c.fn_);
            for v in r.values {
                let _ = write!(out, ",{v:.9}");
            }
            out.push('\n');
        }
        out
    }
}

/// Arithmetic mean, min and max of each measure over the images, with
/// histograms. Flagged zeros take part in the means.
pub fn aggregate_report(per_image: &[MetricReport]) -> Result<AggregateReport, MetricsError> {
    if per_image.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let n = per_image.len() as f64;
    let mut mean = [0.0; 12];
    let mut min = [f64::INFINITY; 12];
    let mut max = [f64::NEG_INFINITY; 12];
    let mut zero_denominator_count = [0; 12];
    for r in per_image {
        for i in 0..12 {
            mean[i] += r.values[i];
            min[i] = min[i].min(r.values[i]);
            max[i] = max[i].max(r.values[i]);
            zero_denominator_count[i] += usize::from(r.zero_denominator[i]);
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let histograms = Metric::ALL
        .iter()
        .map(|&m| Histogram::new(m, per_image.iter().map(|r| r.get(m))))
        .collect();
    Ok(AggregateReport {
        per_image: per_image.to_vec(),
        mean,
        min,
        max,
        zero_denominator_count,
        histograms,
    })
}

/// Scores the summed counts of all images as one report.
pub fn pooled_report(per_image: &[MetricReport]) -> Result<AggregateReport, MetricsError> {
    let total = per_image
        .iter()
        .map(|r| r.counts)
        .reduce(|a, b| a + b)
        .ok_or(MetricsError::EmptyList)?;
    aggregate_report(&[compute_metrics(total)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_counts() {
        let r = compute_metrics(ConfusionCounts::new(50, 40, 10, 0)).unwrap();
        assert!((r.accuracy() - 0.9).abs() < 1e-12);
        assert_eq!(r.sensitivity(), 1.0);
        assert!((r.specificity() - 0.8).abs() < 1e-12);
        assert!((r.precision() - 50.0 / 60.0).abs() < 1e-12);
        assert!((r.informedness() - 0.8).abs() < 1e-12);
        assert!((r.mcc() - 2000.0 / (60.0f64 * 50.0 * 50.0 * 40.0).sqrt()).abs() < 1e-12);
        assert!(!r.zero_denominator.iter().any(|&z| z));
    }

    #[test]
    fn perfect_and_chance() {
        let r = compute_metrics(ConfusionCounts::new(7, 7, 0, 0)).unwrap();
        for m in [
            Metric::Accuracy,
            Metric::Sensitivity,
            Metric::Specificity,
            Metric::Precision,
            Metric::Npv,
            Metric::F1,
            Metric::Mcc,
        ] {
            assert_eq!(r.get(m), 1.0, "{}", m.name());
        }
        for m in [Metric::Fpr, Metric::Fnr, Metric::Fdr] {
            assert_eq!(r.get(m), 0.0);
        }
        let c = compute_metrics(ConfusionCounts::new(3, 3, 3, 3)).unwrap();
        assert_eq!(c.accuracy(), 0.5);
        assert_eq!(c.mcc(), 0.0);
        assert_eq!(c.informedness(), 0.0);
    }

    #[test]
    fn zero_denominators_flagged() {
        let r = compute_metrics(ConfusionCounts::new(0, 10, 0, 0)).unwrap();
        assert!(r.flagged(Metric::Sensitivity));
        assert!(r.flagged(Metric::Precision));
        assert!(r.flagged(Metric::Fnr));
        assert!(r.flagged(Metric::Mcc));
        assert!(r.flagged(Metric::F1));
        assert!(!r.flagged(Metric::Specificity));
        assert_eq!(r.sensitivity(), 0.0);
        assert_eq!(
            compute_metrics(ConfusionCounts::default()),
            Err(MetricsError::EmptyCounts)
        );
    }

    #[test]
    fn masks() {
        let truth = [1u8, 0, 1, 0];
        let same = [1.0f32, 0.0, 1.0, 0.0];
        let c = confusion_from_masks(&same, &truth, 0.5).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inv = [0.0f32, 1.0, 0.0, 1.0];
        let c = confusion_from_masks(&inv, &truth, 0.5).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        let c = confusion_from_masks(&[0.0f64; 4], &truth, 0.0).unwrap();
        assert_eq!(c, ConfusionCounts::new(2, 0, 2, 0));
        assert!(confusion_from_masks(&[0.5f32; 3], &truth, 0.5).is_err());
        assert!(confusion_from_masks(&same, &truth, 1.5).is_err());
    }

    #[test]
    fn aggregation() {
        let a = compute_metrics(ConfusionCounts::new(5, 5, 0, 0)).unwrap();
        let b = compute_metrics(ConfusionCounts::new(3, 3, 3, 3)).unwrap();
        let single = aggregate_report(&[a]).unwrap();
        assert_eq!(single.mean, a.values);
        let two = aggregate_report(&[a, b]).unwrap();
        assert_eq!(two.mean_of(Metric::Accuracy), 0.75);
        assert_eq!(two.histograms[Metric::Accuracy.index()].counts[19], 1);
        assert_eq!(two.histograms[Metric::Accuracy.index()].counts[10], 1);
        assert_eq!(two.histograms[Metric::Mcc.index()].counts[10], 1);
        assert_eq!(aggregate_report(&[]), Err(MetricsError::EmptyList));
        let csv = two.summary_csv();
        assert!(csv.starts_with(
            "metric,mean,min,max,zero_denominator_count\naccuracy,0.750000000,0.500000000,1.000000000,0\n"
        ));
        assert_eq!(two.per_image_csv().lines().count(), 3);
        let pooled = pooled_report(&[a, b]).unwrap();
        assert_eq!(pooled.per_image[0].counts, ConfusionCounts::new(8, 8, 3, 3));
    }
}
