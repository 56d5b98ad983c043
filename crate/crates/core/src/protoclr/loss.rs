use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Source prototype of each query row when queries are laid out
/// prototype-major (`Q` consecutive rows per prototype).
pub fn query_targets(n: usize, q: usize) -> Vec<usize> {
    (0..n * q).map(|r| r / q).collect()
}

fn check_geometry(op: &'static str, n: usize, queries: usize, q: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::contract(op, format!("need at least 2 prototypes, got {n}")));
    }
    if q == 0 || queries != n * q {
        return Err(Error::shape(op, "query (0)", format!("{queries} query rows for {n} prototypes x {q} queries")));
    }
    Ok(())
}

/// Record the prototype-contrastive loss: each query row is classified by a
/// softmax over negated squared distances to all prototypes, and the loss is
/// the mean cross-entropy against its own prototype.
///
/// `protos` is `[N, D]`, `queries` is `[N * Q, D]` prototype-major. Per-row
/// losses are available through [`Tape::row_losses`] on the result.
pub fn protoclr_loss_on_tape(tape: &mut Tape, protos: Var, queries: Var, q: usize) -> Result<(Var, Var)> {
    let n = tape.value(protos).shape()[0];
    let m = tape.value(queries).shape()[0];
    check_geometry("protoclr_loss", n, m, q)?;
    let dist = tape.pairwise_sq_dist(queries, protos)?;
    let logits = tape.scale(dist, -1.0);
    let loss = tape.cross_entropy(logits, &query_targets(n, q))?;
    Ok((loss, dist))
}

/// Loss and per-query losses `l(i, q)` (prototype-major) for fixed embeddings.
/// `queries` may be `[N, Q, D]` or `[N * Q, D]`.
pub fn protoclr_loss(protos: &Tensor, queries: &Tensor) -> Result<(f32, Vec<f32>)> {
    let (q, flat) = flatten_queries(protos, queries)?;
    let mut tape = Tape::new();
    let p = tape.constant(protos.clone());
    let x = tape.constant(flat);
    let (loss, _) = protoclr_loss_on_tape(&mut tape, p, x, q)?;
    let rows = tape.row_losses(loss).expect("cross-entropy node").to_vec();
    Ok((tape.value(loss).data()[0], rows))
}

fn flatten_queries(protos: &Tensor, queries: &Tensor) -> Result<(usize, Tensor)> {
    if protos.rank() != 2 {
        return Err(Error::shape("protoclr_loss", "rank", format!("prototypes have rank {}", protos.rank())));
    }
    let (n, d) = (protos.shape()[0], protos.shape()[1]);
    match *queries.shape() {
        [qn, q, qd] if qn == n && qd == d => Ok((q, queries.clone().reshape(vec![n * q, d])?)),
        [m, qd] if qd == d && n > 0 && m % n == 0 => Ok((m / n, queries.clone())),
        ref s => Err(Error::shape(
            "protoclr_loss",
            "query",
            format!("{s:?} does not match {n} prototypes of dimension {d}"),
        )),
    }
}

/// Index of the smallest entry of each row; ties go to the lowest index.
pub fn nearest(dist: &[f32], cols: usize) -> Vec<usize> {
    dist.chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Fraction of query rows whose nearest prototype is their source,
/// from a `[N * Q, N]` distance matrix.
pub fn accuracy_from_distances(dist: &[f32], n: usize, q: usize) -> f32 {
    let hits = nearest(dist, n)
        .into_iter()
        .zip(query_targets(n, q))
        .filter(|(a, b)| a == b)
        .count();
    hits as f32 / (n * q) as f32
}

/// Nearest-prototype accuracy of the queries (squared Euclidean, ties to
/// the lowest prototype index).
pub fn training_accuracy(protos: &Tensor, queries: &Tensor) -> Result<f32> {
    let (q, flat) = flatten_queries(protos, queries)?;
    let n = protos.shape()[0];
    let mut tape = Tape::new();
    let p = tape.constant(protos.clone());
    let x = tape.constant(flat);
    let dist = tape.pairwise_sq_dist(x, p)?;
    Ok(accuracy_from_distances(tape.value(dist).data(), n, q))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identical_embeddings_give_log_n() {
        let protos = Tensor::full(&[50, 4], 0.3);
        let queries = Tensor::full(&[50, 3, 4], 0.3);
        let (loss, rows) = protoclr_loss(&protos, &queries).unwrap();
        assert!((loss as f64 - 50f64.ln()).abs() < 1e-5);
        assert!(rows.iter().all(|&l| (l as f64 - 50f64.ln()).abs() < 1e-5));
        // every row ties; all go to prototype 0
        assert!((training_accuracy(&protos, &queries).unwrap() - 1.0 / 50.0).abs() < 1e-7);
    }

    #[test]
    fn two_prototype_scalar_case() {
        // query of the prototype at 0 sits at 0.5: d_own = 0.25, d_other = 2.25
        let protos = t(&[2, 1], &[0.0, 2.0]);
        let queries = t(&[2, 1], &[0.5, 2.0]);
        let (_, rows) = protoclr_loss(&protos, &queries).unwrap();
        let expect = -((-0.25f64).exp() / ((-0.25f64).exp() + (-2.25f64).exp())).ln();
        assert!((rows[0] as f64 - expect).abs() < 1e-6, "{rows:?}");
        assert!((rows[0] as f64 - 0.126928).abs() < 1e-6);
        // misplaced query at 1.5 on the other side: d_own = 2.25, d_other = 0.25
        let queries = t(&[2, 1], &[1.5, 2.0]);
        let (_, rows) = protoclr_loss(&protos, &queries).unwrap();
        assert!((rows[0] as f64 - (1.0 + 2f64.exp()).ln()).abs() < 1e-6);
    }

    #[test]
    fn single_prototype_rejected() {
        let protos = Tensor::full(&[1, 2], 0.0);
        let queries = Tensor::full(&[1, 3, 2], 0.0);
        assert!(matches!(protoclr_loss(&protos, &queries), Err(Error::Contract { .. })));
    }

    #[test]
    fn accuracy_cases() {
        let protos = t(&[2, 1], &[0.0, 5.0]);
        assert_eq!(training_accuracy(&protos, &t(&[2, 1], &[0.0, 5.0])).unwrap(), 1.0);
        assert_eq!(training_accuracy(&protos, &t(&[2, 1], &[5.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn nearest_breaks_ties_low() {
        assert_eq!(nearest(&[1.0, 1.0, 0.5, 0.5], 4), vec![2]);
    }
}
