use super::{EngineError, Scalar, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_xent<F: Scalar>(
    logits: &Tensor<F>,
    labels: &[usize],
) -> Result<(f64, Tensor<F>), EngineError> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(EngineError::ShapeMismatch {
            layer: usize::MAX,
            expected: vec![labels.len(), shape.last().copied().unwrap_or(0)],
            actual: shape.to_vec(),
        });
    }
    let (n, classes) = (shape[0], shape[1]);
    let inv_n = 1.0 / n as f64;
    let mut grad = vec![F::zero(); n * classes];
    let mut loss = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(EngineError::LabelOutOfRange { label, classes });
        }
        let row = &logits.data()[s * classes..(s + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + max - row[label].as_f64();
        for (c, e) in exps.iter().enumerate() {
            let p = e / sum - if c == label { 1.0 } else { 0.0 };
            grad[s * classes + c] = F::from_f64(p * inv_n);
        }
    }
    Ok((loss * inv_n, Tensor::new(vec![n, classes], grad)?))
}

/// Index of the largest logit per row; ties resolve to the lowest class.
pub fn argmax_rows<F: Scalar>(logits: &Tensor<F>) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
