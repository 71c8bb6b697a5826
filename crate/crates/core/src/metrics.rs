//! Confusion-matrix bookkeeping and the derived segmentation metrics:
//! global accuracy, mean class accuracy, mean IoU, and grouped (static /
//! dynamic) accuracy. Counts are exact integers; metrics divide at the end,
//! so evaluation order and sharding cannot change any reported number.

use crate::error::TrainError;
use crate::tensor::{IntTensor, VOID};

/// `counts[g * classes + p]` = pixels with ground truth `g` predicted `p`.
/// Void ground-truth pixels never enter the matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

/// Raised when a prediction map contains void or an id outside the class
/// table — predictions must always be real classes.
fn bad_pred(label: u8, classes: usize) -> TrainError {
    TrainError::Tensor(crate::error::TensorError::LabelOutOfRange {
        label,
        classes,
        void: VOID,
    })
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        assert!(classes >= 1 && classes < VOID as usize);
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Count of (ground truth g, predicted p) pixels.
    pub fn count(&self, g: usize, p: usize) -> u64 {
        self.counts[g * self.classes + p]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.count(c, c)).sum()
    }

    pub fn row_sum(&self, g: usize) -> u64 {
        self.counts[g * self.classes..][..self.classes].iter().sum()
    }

    pub fn col_sum(&self, p: usize) -> u64 {
        (0..self.classes).map(|g| self.count(g, p)).sum()
    }

    /// Accumulates one (prediction, ground truth) pair of equal-shaped maps.
    /// Ground-truth void pixels are skipped; void or out-of-range ids in
    /// `pred` are errors, as is an out-of-range non-void id in `gt`. A
    /// rejected pair leaves the matrix untouched — counts only ever grow by
    /// whole updates.
    pub fn update(&mut self, pred: &IntTensor, gt: &IntTensor) -> Result<(), TrainError> {
        if pred.shape() != gt.shape() {
            return Err(TrainError::Tensor(crate::error::TensorError::ShapeMismatch {
                op: "ConfusionMatrix::update",
                dim: 0,
                expected: gt.shape().to_vec(),
                got: pred.shape().to_vec(),
            }));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == VOID {
                continue;
            }
            if g as usize >= self.classes {
                return Err(bad_pred(g, self.classes));
            }
            if p == VOID || p as usize >= self.classes {
                return Err(bad_pred(p, self.classes));
            }
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == VOID {
                continue;
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise addition; shards of a dataset merge into the same totals
    /// regardless of order.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), TrainError> {
        if self.classes != other.classes {
            return Err(TrainError::Tensor(crate::error::TensorError::DimMismatch {
                op: "ConfusionMatrix::merge",
                dim: "classes",
                expected: self.classes,
                got: other.classes,
            }));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// trace / total. Errors on an empty matrix rather than returning NaN.
    pub fn global_accuracy(&self) -> Result<f64, TrainError> {
        let total = self.total();
        if total == 0 {
            return Err(TrainError::EmptyMatrix);
        }
        Ok(self.trace() as f64 / total as f64)
    }

    /// Per-class recall; `None` for classes absent from the ground truth.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let row = self.row_sum(c);
                (row > 0).then(|| self.count(c, c) as f64 / row as f64)
            })
            .collect()
    }

    /// Mean per-class recall over classes present in the ground truth.
    pub fn class_accuracy(&self) -> Result<f64, TrainError> {
        let per = self.per_class_accuracy();
        let present: Vec<f64> = per.into_iter().flatten().collect();
        if present.is_empty() {
            return Err(TrainError::EmptyMatrix);
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    /// Per-class TP/(TP+FP+FN); `None` for classes absent from both ground
    /// truth and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.count(c, c);
                let union = self.row_sum(c) + self.col_sum(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a nonempty union.
    pub fn mean_iou(&self) -> Result<f64, TrainError> {
        let per = self.per_class_iou();
        let present: Vec<f64> = per.into_iter().flatten().collect();
        if present.is_empty() {
            return Err(TrainError::EmptyMatrix);
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    /// Pixel-weighted accuracy restricted to ground-truth pixels of each
    /// group: `sum_{g in G} counts[g][g] / sum_{g in G} rowsum(g)`.
    ///
    /// `partition[c]` assigns class c to a group id `0..n_groups`. A group
    /// with zero ground-truth pixels is reported as `None` (absent), not 0.
    pub fn grouped_accuracy(
        &self,
        partition: &[usize],
        n_groups: usize,
    ) -> Result<Vec<Option<f64>>, TrainError> {
        if partition.len() != self.classes {
            return Err(TrainError::Tensor(crate::error::TensorError::DimMismatch {
                op: "grouped_accuracy",
                dim: "partition length",
                expected: self.classes,
                got: partition.len(),
            }));
        }
        let mut correct = vec![0u64; n_groups];
        let mut pixels = vec![0u64; n_groups];
        for (c, &grp) in partition.iter().enumerate() {
            if grp >= n_groups {
                return Err(TrainError::Tensor(crate::error::TensorError::DimMismatch {
                    op: "grouped_accuracy",
                    dim: "group id",
                    expected: n_groups,
                    got: grp,
                }));
            }
            correct[grp] += self.count(c, c);
            pixels[grp] += self.row_sum(c);
        }
        Ok(correct
            .iter()
            .zip(&pixels)
            .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
            .collect())
    }
}

/// All reported numbers for one evaluation run, plus the CSV serialization
/// used by the command-line tools.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixels_per_class: Vec<u64>,
    pub global_accuracy: f64,
    pub class_accuracy: f64,
    pub mean_iou: f64,
    /// Pixel-weighted accuracy over static classes; `None` if absent.
    pub static_accuracy: Option<f64>,
    /// Pixel-weighted accuracy over dynamic classes; `None` if absent.
    pub dynamic_accuracy: Option<f64>,
}

impl MetricsReport {
    /// Derives the full report from a confusion matrix. `class_names` and
    /// `dynamic` (one flag per class) must match the matrix's class count.
    pub fn from_matrix(
        cm: &ConfusionMatrix,
        class_names: &[String],
        dynamic: &[bool],
    ) -> Result<MetricsReport, TrainError> {
        assert_eq!(class_names.len(), cm.classes());
        assert_eq!(dynamic.len(), cm.classes());
        let partition: Vec<usize> = dynamic.iter().map(|&d| usize::from(d)).collect();
        let grouped = cm.grouped_accuracy(&partition, 2)?;
        Ok(MetricsReport {
            class_names: class_names.to_vec(),
            per_class_accuracy: cm.per_class_accuracy(),
            per_class_iou: cm.per_class_iou(),
            pixels_per_class: (0..cm.classes()).map(|c| cm.row_sum(c)).collect(),
            global_accuracy: cm.global_accuracy()?,
            class_accuracy: cm.class_accuracy()?,
            mean_iou: cm.mean_iou()?,
            static_accuracy: grouped[0],
            dynamic_accuracy: grouped[1],
        })
    }

    /// CSV with one row per class (name, accuracy, iou, pixels) followed by
    /// summary rows. Absent values serialize as empty fields.
    pub fn to_csv(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map(|x| format!("{x:.6}")).unwrap_or_default()
        }
        let mut out = String::from("name,accuracy,iou,pixels\n");
        for (i, name) in self.class_names.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                name,
                cell(self.per_class_accuracy[i]),
                cell(self.per_class_iou[i]),
                self.pixels_per_class[i]
            ));
        }
        let total: u64 = self.pixels_per_class.iter().sum();
        out.push_str(&format!(
            "global,{:.6},,{}\n",
            self.global_accuracy, total
        ));
        out.push_str(&format!("class_mean,{:.6},,\n", self.class_accuracy));
        out.push_str(&format!("mean_iou,,{:.6},\n", self.mean_iou));
        out.push_str(&format!("static,{},,\n", cell(self.static_accuracy)));
        out.push_str(&format!("dynamic,{},,\n", cell(self.dynamic_accuracy)));
        out
    }
}
