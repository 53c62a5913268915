//! Zero-shot classification: score a clip's latent projection against
//! text-derived class anchors by cosine similarity, softmax with a
//! temperature, and report the best class. Pruned operation reduces both
//! sides to the same surviving coordinates and re-normalizes, so full-width
//! scoring is exactly the r = d special case.

use crate::distill::{eval_mels, LoadedDataset};
use crate::encoder::StudentEncoder;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::{EmbeddingTable, FrontendConfig};
use crate::tensor::Tensor;

/// The caption fed to the text encoder for a class label. Verbatim
/// concatenation; the label is not trimmed or case-folded.
pub fn build_caption(label: &str) -> Result<String> {
    if label.is_empty() {
        return Err(Error::contract("class label must not be empty"));
    }
    Ok(format!("this is the sound of {label}"))
}

/// Class anchors in the original latent space, L2-normalized up front.
#[derive(Clone, Debug)]
pub struct ClassEmbeddingSet<S: Scalar> {
    labels: Vec<String>,
    dim: usize,
    /// Row-normalized, one row per label.
    vectors: Vec<Vec<S>>,
}

impl<S: Scalar> ClassEmbeddingSet<S> {
    pub fn new(labels: Vec<String>, raw: Vec<Vec<f64>>) -> Result<Self> {
        if labels.is_empty() || labels.len() != raw.len() {
            return Err(Error::contract(format!(
                "need one vector per label, got {} labels and {} vectors",
                labels.len(),
                raw.len()
            )));
        }
        let dim = raw[0].len();
        let mut seen = std::collections::BTreeSet::new();
        let mut vectors = Vec::with_capacity(raw.len());
        for (label, v) in labels.iter().zip(&raw) {
            if label.is_empty() {
                return Err(Error::contract("class label must not be empty"));
            }
            if !seen.insert(label.clone()) {
                return Err(Error::data(format!("class label {label:?} appears twice")));
            }
            if v.len() != dim {
                return Err(Error::contract(format!(
                    "class {label:?} has dimension {} but the set is {dim}-wide",
                    v.len()
                )));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::data(format!(
                    "class embedding for {label:?} is the zero vector"
                )));
            }
            vectors.push(v.iter().map(|&x| S::from_f64_c(x / norm)).collect());
        }
        Ok(Self { labels, dim, vectors })
    }

    /// Table rows become classes; ids are the labels.
    pub fn from_table(table: &EmbeddingTable) -> Result<Self> {
        let labels: Vec<String> = table.entries.iter().map(|(id, _)| id.clone()).collect();
        let raw: Vec<Vec<f64>> = table
            .entries
            .iter()
            .map(|(_, v)| v.iter().map(|&x| x as f64).collect())
            .collect();
        Self::new(labels, raw)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Which latent coordinates take part in scoring.
#[derive(Clone, Copy, Debug)]
pub enum Selection<'a> {
    /// Every coordinate; the student arrives full-width.
    Full,
    /// The student arrives full-width; both sides are cut to these
    /// original coordinates and re-normalized.
    Both(&'a [usize]),
    /// The student already arrives reduced (a pruned encoder); only the
    /// text side is cut, to the same original coordinates.
    TextOnly(&'a [usize]),
}

impl Selection<'_> {
    fn validate(&self, student_len: usize, dim: usize) -> Result<()> {
        let check_indices = |idx: &[usize]| -> Result<()> {
            if idx.is_empty() {
                return Err(Error::contract("selection must keep at least one coordinate"));
            }
            let mut seen = std::collections::BTreeSet::new();
            for &i in idx {
                if i >= dim {
                    return Err(Error::contract(format!(
                        "selection index {i} is outside the {dim}-wide latent space"
                    )));
                }
                if !seen.insert(i) {
                    return Err(Error::contract(format!("selection index {i} is listed twice")));
                }
            }
            Ok(())
        };
        match self {
            Self::Full => {
                if student_len != dim {
                    return Err(Error::contract(format!(
                        "student projection is {student_len}-wide but the class set is {dim}-wide"
                    )));
                }
            }
            Self::Both(idx) => {
                check_indices(idx)?;
                if student_len != dim {
                    return Err(Error::contract(format!(
                        "student projection is {student_len}-wide but the class set is {dim}-wide"
                    )));
                }
            }
            Self::TextOnly(idx) => {
                check_indices(idx)?;
                if student_len != idx.len() {
                    return Err(Error::contract(format!(
                        "student projection is {student_len}-wide but the selection keeps {}",
                        idx.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub predicted_index: usize,
    pub predicted_label: String,
    /// Aligned with the class set's label order.
    pub probabilities: Vec<f64>,
    /// Cosine similarities before the softmax, same order.
    pub similarities: Vec<f64>,
}

fn normalized_f64(v: &[f64], what: &str) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < 1e-12 {
        return Err(Error::numeric(format!("{what} has no direction (norm {norm})")));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Scores one raw (un-normalized) student projection against the class
/// set. The argmax is taken over raw cosines, so the temperature shapes
/// confidence but can never change the winner.
pub fn classify<S: Scalar>(
    student_raw: &[S],
    classes: &ClassEmbeddingSet<S>,
    selection: Selection<'_>,
    tau: f64,
) -> Result<Prediction> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::contract(format!("temperature {tau} must be positive and finite")));
    }
    selection.validate(student_raw.len(), classes.dim)?;

    let student_f64: Vec<f64> = student_raw.iter().map(|x| x.to_f64_c()).collect();
    let student_sel: Vec<f64> = match selection {
        Selection::Full => student_f64,
        Selection::Both(idx) => idx.iter().map(|&i| student_f64[i]).collect(),
        Selection::TextOnly(_) => student_f64,
    };
    let s = normalized_f64(&student_sel, "student projection")?;

    let mut similarities = Vec::with_capacity(classes.len());
    for (label, v) in classes.labels.iter().zip(&classes.vectors) {
        let anchor: Vec<f64> = match selection {
            Selection::Full => v.iter().map(|x| x.to_f64_c()).collect(),
            Selection::Both(idx) | Selection::TextOnly(idx) => {
                let cut: Vec<f64> = idx.iter().map(|&i| v[i].to_f64_c()).collect();
                normalized_f64(&cut, &format!("class {label:?} under this selection"))?
            }
        };
        similarities.push(s.iter().zip(&anchor).map(|(a, b)| a * b).sum::<f64>());
    }

    let mut predicted_index = 0;
    for (i, &c) in similarities.iter().enumerate() {
        if c > similarities[predicted_index] {
            predicted_index = i;
        }
    }

    let max_logit = similarities.iter().fold(f64::NEG_INFINITY, |m, &c| m.max(tau * c));
    let exps: Vec<f64> = similarities.iter().map(|&c| (tau * c - max_logit).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probabilities: Vec<f64> = exps.iter().map(|e| e / total).collect();

    Ok(Prediction {
        predicted_index,
        predicted_label: classes.labels[predicted_index].clone(),
        probabilities,
        similarities,
    })
}

/// Accuracy plus a confusion table over the class set's label order.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub labels: Vec<String>,
    pub n: usize,
    pub correct: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalOutcome {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n as f64
    }

    /// Confusion table as CSV: header row of predicted labels, one row per
    /// true label.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(l);
            for c in &self.confusion[i] {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Scores precomputed raw projections, one row per clip, against their
/// true labels. Every true label must name a class.
pub fn evaluate_latents<S: Scalar>(
    latents: &Tensor<S>,
    true_labels: &[&str],
    classes: &ClassEmbeddingSet<S>,
    selection: Selection<'_>,
    tau: f64,
) -> Result<EvalOutcome> {
    if latents.shape().len() != 2 || latents.shape()[0] != true_labels.len() {
        return Err(Error::contract(format!(
            "need one label per projection row, got {:?} and {} labels",
            latents.shape(),
            true_labels.len()
        )));
    }
    let k = classes.len();
    let (n, w) = (latents.shape()[0], latents.shape()[1]);
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    for (i, &label) in true_labels.iter().enumerate() {
        let truth = classes
            .labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::data(format!("clip label {label:?} is not a known class")))?;
        let row = &latents.data()[i * w..(i + 1) * w];
        let pred = classify(row, classes, selection, tau)?;
        confusion[truth][pred.predicted_index] += 1;
        if pred.predicted_index == truth {
            correct += 1;
        }
    }
    Ok(EvalOutcome { labels: classes.labels.clone(), n, correct, confusion })
}

/// Embeds every clip (eval mode, center crops) and scores it against the
/// class set. Clips must all carry labels.
pub fn evaluate<S: Scalar>(
    enc: &StudentEncoder<S>,
    ds: &LoadedDataset,
    fe: &FrontendConfig,
    classes: &ClassEmbeddingSet<S>,
    selection: Selection<'_>,
    tau: f64,
) -> Result<EvalOutcome> {
    let mut labels = Vec::with_capacity(ds.len());
    for c in &ds.clips {
        match &c.label {
            Some(l) => labels.push(l.as_str()),
            None => {
                return Err(Error::data(format!("clip {:?} has no label", c.id)));
            }
        }
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mels = eval_mels(ds, &indices, fe)?;
    let latents = enc.embed_raw(&mels)?;
    evaluate_latents(&latents, &labels, classes, selection, tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_classes() -> ClassEmbeddingSet<f64> {
        ClassEmbeddingSet::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
            ],
        )
        .unwrap()
    }

    #[test]
    fn caption_is_a_verbatim_concatenation() {
        assert_eq!(build_caption("dog barking").unwrap(), "this is the sound of dog barking");
        assert_eq!(build_caption(" Dog ").unwrap(), "this is the sound of  Dog ");
        let err = build_caption("").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn two_class_softmax_matches_the_closed_form() {
        let classes = ClassEmbeddingSet::<f64>::new(
            vec!["x".into(), "y".into()],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        // Cosines are exactly (1, 0): softmax gives (e/(e+1), 1/(e+1)).
        let p = classify(&[1.0, 0.0], &classes, Selection::Full, 1.0).unwrap();
        assert!((p.probabilities[0] - 0.731059).abs() < 1e-6, "{:?}", p.probabilities);
        assert!((p.probabilities[1] - 0.268941).abs() < 1e-6);
        assert_eq!(p.predicted_label, "x");
    }

    #[test]
    fn temperature_shapes_confidence_but_never_the_winner() {
        let classes = three_classes();
        let student = [0.3, 0.9, -0.2, 0.4];
        let mut winners = Vec::new();
        let mut top_probs = Vec::new();
        for tau in [0.1, 1.0, 10.0, 100.0] {
            let p = classify(&student, &classes, Selection::Full, tau).unwrap();
            winners.push(p.predicted_label.clone());
            top_probs.push(p.probabilities[p.predicted_index]);
        }
        assert!(winners.iter().all(|w| w == "b"), "{winners:?}");
        assert!(top_probs[3] > top_probs[0], "sharper temperature must concentrate mass");
    }

    #[test]
    fn probabilities_form_a_simplex() {
        let classes = three_classes();
        let p = classify(&[0.2, -0.1, 0.5, 0.3], &classes, Selection::Full, 2.5).unwrap();
        let total: f64 = p.probabilities.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(p.probabilities.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn identity_selection_reproduces_full_width_scoring() {
        let classes = three_classes();
        let student = [0.3, 0.9, -0.2, 0.4];
        let full = classify(&student, &classes, Selection::Full, 3.0).unwrap();
        let idx = [0, 1, 2, 3];
        let both = classify(&student, &classes, Selection::Both(&idx), 3.0).unwrap();
        for (a, b) in full.probabilities.iter().zip(&both.probabilities) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(full.predicted_label, both.predicted_label);
    }

    #[test]
    fn selection_equals_zero_masking_both_sides() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let dim = 8;
        let idx = [6usize, 1, 4];
        let labels: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        let raw: Vec<Vec<f64>> =
            (0..3).map(|_| (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
        let student: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();

        let selected = classify(
            &student,
            &ClassEmbeddingSet::new(labels.clone(), raw.clone()).unwrap(),
            Selection::Both(&idx),
            4.0,
        )
        .unwrap();

        let mask = |v: &[f64]| -> Vec<f64> {
            (0..dim).map(|j| if idx.contains(&j) { v[j] } else { 0.0 }).collect()
        };
        let masked_classes =
            ClassEmbeddingSet::new(labels, raw.iter().map(|v| mask(v)).collect()).unwrap();
        let masked = classify(&mask(&student), &masked_classes, Selection::Full, 4.0).unwrap();

        for (a, b) in selected.probabilities.iter().zip(&masked.probabilities) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert_eq!(selected.predicted_label, masked.predicted_label);
    }

    #[test]
    fn reduced_student_pairs_with_text_only_selection() {
        let classes = ClassEmbeddingSet::<f64>::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                vec![0.9, 0.1, 0.2, 0.3],
                vec![0.2, 0.8, 0.4, 0.1],
                vec![0.1, 0.3, 0.7, 0.5],
            ],
        )
        .unwrap();
        let idx = [2usize, 0];
        // Full student cut by hand to the same coordinates.
        let student = [0.3, 0.9, -0.2, 0.4];
        let reduced = [-0.2, 0.3];
        let a = classify(&student, &classes, Selection::Both(&idx), 1.0).unwrap();
        let b = classify(&reduced, &classes, Selection::TextOnly(&idx), 1.0).unwrap();
        for (x, y) in a.probabilities.iter().zip(&b.probabilities) {
            assert!((x - y).abs() < 1e-12);
        }

        let err = classify(&student, &classes, Selection::TextOnly(&idx), 1.0).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn class_order_permutes_outputs_consistently() {
        let labels = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let raw = vec![
            vec![0.9, 0.1, 0.0, 0.2],
            vec![0.1, 0.8, 0.3, 0.0],
            vec![0.0, 0.2, 0.7, 0.1],
        ];
        let student = [0.5, 0.4, 0.1, 0.2];
        let fwd = classify(
            &student,
            &ClassEmbeddingSet::new(labels.clone(), raw.clone()).unwrap(),
            Selection::Full,
            1.0,
        )
        .unwrap();
        let rev_labels: Vec<String> = labels.iter().rev().cloned().collect();
        let rev_raw: Vec<Vec<f64>> = raw.iter().rev().cloned().collect();
        let rev = classify(
            &student,
            &ClassEmbeddingSet::new(rev_labels, rev_raw).unwrap(),
            Selection::Full,
            1.0,
        )
        .unwrap();
        assert_eq!(fwd.predicted_label, rev.predicted_label);
        for i in 0..3 {
            assert!((fwd.probabilities[i] - rev.probabilities[2 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_similarities_pick_the_first_class() {
        let classes = ClassEmbeddingSet::<f64>::new(
            vec!["p".into(), "q".into()],
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
        )
        .unwrap();
        let p = classify(&[0.7, 0.7], &classes, Selection::Full, 1.0).unwrap();
        assert_eq!(p.predicted_label, "p");
    }

    #[test]
    fn evaluation_counts_the_confusion_table() {
        let classes = ClassEmbeddingSet::<f64>::new(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let latents = Tensor::from_vec(
            vec![3, 2],
            vec![2.0f64, 0.1, 0.1, 3.0, 0.9, 0.2],
            "latents",
        )
        .unwrap();
        let out =
            evaluate_latents(&latents, &["a", "b", "b"], &classes, Selection::Full, 1.0).unwrap();
        assert_eq!(out.n, 3);
        assert_eq!(out.correct, 2);
        assert!((out.accuracy() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(out.confusion, vec![vec![1, 0], vec![1, 1]]);
        let csv = out.confusion_csv();
        assert!(csv.starts_with("true\\predicted,a,b\n"), "{csv}");
        assert!(csv.contains("b,1,1"), "{csv}");
    }

    #[test]
    fn unknown_true_label_is_a_data_error() {
        let classes = three_classes();
        let latents = Tensor::from_vec(vec![1, 4], vec![1.0f64, 0.0, 0.0, 0.0], "l").unwrap();
        let err =
            evaluate_latents(&latents, &["mystery"], &classes, Selection::Full, 1.0).unwrap_err();
        assert_eq!(err.exit_code(), 5);
        assert!(err.to_string().contains("mystery"), "{err}");
    }

    #[test]
    fn zero_class_vector_is_rejected_up_front() {
        let err = ClassEmbeddingSet::<f64>::new(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 0.0], vec![0.0, 0.0]],
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 5);
        assert!(err.to_string().contains('b'), "{err}");
    }

    #[test]
    fn selection_that_nulls_a_class_is_a_numeric_error() {
        // Class b lives entirely on coordinate 1; selecting {0, 2} leaves
        // it with no direction.
        let classes = ClassEmbeddingSet::<f64>::new(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 0.0, 0.5], vec![0.0, 1.0, 0.0]],
        )
        .unwrap();
        let idx = [0usize, 2];
        let err = classify(&[1.0, 0.0, 0.3], &classes, Selection::Both(&idx), 1.0).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains('b'), "{err}");
    }
}
