use std::cmp::Ordering;

use ndarray::{concatenate, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Attention of `current` tokens (rows) over the anchor tokens and themselves:
/// `Q = X Wq`, `K = [A; X] Wk`, `V = [A; X] Wv`, `softmax(Q Kᵀ / √d) V`.
///
/// Without an anchor this is plain self-attention. Each query accumulates its
/// weighted values in an order fixed by (score, value) rather than by key
/// position, so permuting the keys leaves the output bit-for-bit unchanged.
pub fn anchor_attention(
    current: &Array2<f64>,
    anchor: Option<&Array2<f64>>,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    wv: &Array2<f64>,
) -> Result<Array2<f64>> {
    let c = current.ncols();
    if current.nrows() == 0 {
        return Err(Error::Shape(
            "attention needs at least one query token".into(),
        ));
    }
    for (name, w) in [("W_Q", wq), ("W_K", wk), ("W_V", wv)] {
        if w.nrows() != c {
            return Err(Error::Shape(format!(
                "{name} has {} rows, tokens have {c} channels",
                w.nrows()
            )));
        }
    }
    if wq.ncols() != wk.ncols() {
        return Err(Error::Shape(format!(
            "query width {} != key width {}",
            wq.ncols(),
            wk.ncols()
        )));
    }
    let context = match anchor {
        Some(a) if a.ncols() != c => {
            return Err(Error::Shape(format!(
                "anchor has {} channels, current has {c}",
                a.ncols()
            )))
        }
        Some(a) => concatenate(Axis(0), &[a.view(), current.view()]).expect("matching widths"),
        None => current.clone(),
    };
    let q = current.dot(wq);
    let k = context.dot(wk);
    let v = context.dot(wv);
    let scale = 1.0 / (wq.ncols() as f64).sqrt();

    let mut out = Array2::zeros((current.nrows(), wv.ncols()));
    let mut scored: Vec<(f64, ArrayView1<f64>)> = Vec::with_capacity(k.nrows());
    for (qi, q_row) in q.outer_iter().enumerate() {
        scored.clear();
        scored.extend(
            k.outer_iter()
                .zip(v.outer_iter())
                .map(|(k_row, v_row)| (q_row.dot(&k_row) * scale, v_row)),
        );
        scored.sort_by(canonical);
        let max = scored.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut acc = out.row_mut(qi);
        for (s, v_row) in &scored {
            let w = (s - max).exp();
            total += w;
            acc.scaled_add(w, v_row);
        }
        acc /= total;
    }
    Ok(out)
}

fn canonical(a: &(f64, ArrayView1<f64>), b: &(f64, ArrayView1<f64>)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| {
        a.1.iter()
            .zip(b.1.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn scalar_example() {
        // weights e^2 : e^1 over values 2, 1 -> (2e + 1) / (e + 1)
        let one = array![[1.0]];
        let out = anchor_attention(&one, Some(&array![[2.0]]), &one, &one, &one).unwrap();
        let e = std::f64::consts::E;
        assert!((out[[0, 0]] - (2.0 * e + 1.0) / (e + 1.0)).abs() < 1e-12);
        assert!((out[[0, 0]] - 1.7311).abs() < 1e-4);
    }

    #[test]
    fn single_key_returns_its_value() {
        let x = array![[0.3, -0.2]];
        let i = Array2::eye(2);
        let out = anchor_attention(&x, None, &i, &i, &i).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn shape_errors() {
        let x = Array2::<f64>::zeros((3, 2));
        let i = Array2::eye(2);
        assert!(anchor_attention(&x, Some(&Array2::zeros((1, 3))), &i, &i, &i).is_err());
        assert!(anchor_attention(&x, None, &Array2::eye(3), &i, &i).is_err());
        assert!(anchor_attention(&Array2::zeros((0, 2)), None, &i, &i, &i).is_err());
    }
}
