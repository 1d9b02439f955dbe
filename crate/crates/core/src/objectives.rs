//! Training losses, each reduced as a mean over the batch.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Tolerance for the "rows sum to one" precondition of [`cross_entropy`].
const DISTRIBUTION_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: Var,
    pub task_name: String,
    pub batch_size: usize,
}

fn as_vector(g: &mut Graph<'_>, v: Var) -> Result<Var> {
    match g.shape(v).len() {
        0 => g.reshape(v, &[1]),
        _ => Ok(v),
    }
}

fn stack(g: &mut Graph<'_>, parts: Vec<Var>) -> Result<Var> {
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    g.concat(&parts, 0)
}

/// Mean over the batch of `-log p[target]`, with `p` clamped at 1e-12.
pub fn cross_entropy(g: &mut Graph<'_>, preds: &[Var], targets: &[usize], task_name: &str) -> Result<LossValue> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Input(format!(
            "cross entropy over {} predictions and {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut picked = Vec::with_capacity(preds.len());
    for (&p, &t) in preds.iter().zip(targets) {
        let dist = g.value(p);
        if dist.rank() != 1 {
            return Err(Error::Dimension(format!("prediction must be a vector, found {:?}", dist.shape())));
        }
        if t >= dist.len() {
            return Err(Error::Input(format!("target {t} out of range for {} classes", dist.len())));
        }
        let total: f64 = dist.data().iter().sum();
        if (total - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(Error::Contract(format!("prediction sums to {total}, not 1")));
        }
        picked.push(g.gather(p, &[t])?);
    }
    let picked = stack(g, picked)?;
    let logs = g.log(picked)?;
    let mean = g.mean(logs)?;
    let value = g.scale(mean, -1.0)?;
    Ok(LossValue {
        value,
        task_name: task_name.to_string(),
        batch_size: preds.len(),
    })
}

/// Mean over the batch of `(y - score)^2`.
pub fn mse(g: &mut Graph<'_>, preds: &[Var], targets: &[f64], task_name: &str) -> Result<LossValue> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Input(format!(
            "mean squared error over {} predictions and {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut scores = Vec::with_capacity(preds.len());
    for &p in preds {
        if g.value(p).len() != 1 {
            return Err(Error::Dimension(format!("score must be scalar, found {:?}", g.shape(p))));
        }
        scores.push(as_vector(g, p)?);
    }
    let scores = stack(g, scores)?;
    let targets = g.constant(Tensor::vector(targets.to_vec()))?;
    let diff = g.sub(targets, scores)?;
    let sq = g.mul(diff, diff)?;
    let value = g.mean(sq)?;
    Ok(LossValue {
        value,
        task_name: task_name.to_string(),
        batch_size: preds.len(),
    })
}

/// Mean over queries of `-log softmax(gamma * rel)[positive]`, where
/// `scores[q]` holds the relevance of every candidate of query `q` and
/// `positives[q]` flags which candidate is the positive one.
pub fn ranking_nll(
    g: &mut Graph<'_>,
    scores: &[Var],
    positives: &[Vec<bool>],
    gamma: f64,
    task_name: &str,
) -> Result<LossValue> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::Config(format!("ranking gamma must be positive, got {gamma}")));
    }
    if scores.is_empty() || scores.len() != positives.len() {
        return Err(Error::Input(format!(
            "ranking loss over {} score lists and {} label lists",
            scores.len(),
            positives.len()
        )));
    }
    let mut picked = Vec::with_capacity(scores.len());
    for (q, (&s, flags)) in scores.iter().zip(positives).enumerate() {
        let n = g.value(s).len();
        if g.shape(s).len() != 1 || n != flags.len() {
            return Err(Error::Dimension(format!(
                "query {q}: {:?} scores for {} candidates",
                g.shape(s),
                flags.len()
            )));
        }
        if n < 2 {
            return Err(Error::Input(format!("query {q} has fewer than 2 candidates")));
        }
        let mut found = flags.iter().enumerate().filter(|(_, &p)| p).map(|(i, _)| i);
        let positive = match (found.next(), found.next()) {
            (Some(i), None) => i,
            (None, _) => return Err(Error::Input(format!("query {q} has no positive candidate"))),
            (Some(_), Some(_)) => return Err(Error::Input(format!("query {q} has several positive candidates"))),
        };
        let scaled = g.scale(s, gamma)?;
        let probs = g.softmax(scaled, 0)?;
        picked.push(g.gather(probs, &[positive])?);
    }
    let picked = stack(g, picked)?;
    let logs = g.log(picked)?;
    let mean = g.mean(logs)?;
    let value = g.scale(mean, -1.0)?;
    Ok(LossValue {
        value,
        task_name: task_name.to_string(),
        batch_size: scores.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(g: &Graph, l: &LossValue) -> f64 {
        g.value(l.value).item().unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let certain = g.constant(Tensor::vector(vec![0.0, 1.0])).unwrap();
        let l = cross_entropy(&mut g, &[certain], &[1], "t").unwrap();
        assert_eq!(loss_of(&g, &l), 0.0);

        let uniform = g.constant(Tensor::vector(vec![1.0 / 3.0; 3])).unwrap();
        let l = cross_entropy(&mut g, &[uniform], &[2], "t").unwrap();
        assert!((loss_of(&g, &l) - 1.098_612_288_668_109_7).abs() < 1e-12);

        let l = cross_entropy(&mut g, &[certain], &[0], "t").unwrap();
        let v = loss_of(&g, &l);
        assert!(v.is_finite() && (v + 1e-12f64.ln()).abs() < 1e-9);

        assert!(matches!(cross_entropy(&mut g, &[certain], &[2], "t"), Err(Error::Input(_))));
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.7)).unwrap();
        let l = mse(&mut g, &[a], &[0.7], "t").unwrap();
        assert_eq!(loss_of(&g, &l), 0.0);
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        let l = mse(&mut g, &[z], &[2.0], "t").unwrap();
        assert_eq!(loss_of(&g, &l), 4.0);
        assert!(matches!(mse(&mut g, &[z, a], &[1.0], "t"), Err(Error::Input(_))));
    }

    #[test]
    fn mse_matches_mean_of_squares() {
        let preds = [0.3, -1.2, 2.5, 0.0, 7.1];
        let targets = [0.1, -1.0, 3.0, 0.4, 6.0];
        let expected = preds.iter().zip(&targets).map(|(p, t)| (t - p) * (t - p)).sum::<f64>() / 5.0;
        let mut g = Graph::new();
        let vars: Vec<Var> = preds.iter().map(|&p| g.constant(Tensor::scalar(p)).unwrap()).collect();
        let l = mse(&mut g, &vars, &targets, "t").unwrap();
        assert!((loss_of(&g, &l) - expected).abs() < 1e-12);
        assert_eq!(l.batch_size, 5);
    }

    #[test]
    fn ranking_examples() {
        let mut g = Graph::new();
        let equal = g.constant(Tensor::vector(vec![0.4, 0.4])).unwrap();
        let l = ranking_nll(&mut g, &[equal], &[vec![true, false]], 1.0, "t").unwrap();
        assert!((loss_of(&g, &l) - std::f64::consts::LN_2).abs() < 1e-12);

        let sep = g.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let l = ranking_nll(&mut g, &[sep], &[vec![true, false]], 1.0, "t").unwrap();
        assert!((loss_of(&g, &l) - 0.313_261_687_518_222_8).abs() < 1e-12);

        assert!(matches!(
            ranking_nll(&mut g, &[sep], &[vec![false, false]], 1.0, "t"),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            ranking_nll(&mut g, &[sep], &[vec![true, true]], 1.0, "t"),
            Err(Error::Input(_))
        ));
        assert!(ranking_nll(&mut g, &[sep], &[vec![true, false]], 0.0, "t").is_err());
    }
}
