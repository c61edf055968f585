use crate::error::{Error, Result};
use crate::mesh::{KdTree, Vec3};

/// Sum of squared nearest distances from each point of `from` to `to`,
/// accumulated in point order. Also returns the nearest index per point.
pub(crate) fn one_sided(from: &[Vec3], to: &KdTree) -> (f64, Vec<usize>) {
    let mut sum = 0.0;
    let mut nn = Vec::with_capacity(from.len());
    for p in from {
        let (j, d2) = to.nearest(p).expect("non-empty tree");
        sum += d2;
        nn.push(j);
    }
    (sum, nn)
}

/// Symmetric Chamfer distance
/// `Σ_{x∈S} min_y ‖x−y‖² + Σ_{y∈T} min_x ‖x−y‖²` (squared length units).
pub fn chamfer(source: &[Vec3], target: &[Vec3]) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("chamfer distance needs two nonempty point sets"));
    }
    let (a, _) = one_sided(source, &KdTree::new(target));
    let (b, _) = one_sided(target, &KdTree::new(source));
    Ok(a + b)
}

/// Chamfer distance and its gradient with respect to the source points.
/// `target_tree` must index `target`.
pub fn chamfer_with_grad(source: &[Vec3], target: &[Vec3], target_tree: &KdTree) -> (f64, Vec<Vec3>) {
    let (a, nn_s) = one_sided(source, target_tree);
    let (b, nn_t) = one_sided(target, &KdTree::new(source));
    let mut grad: Vec<Vec3> = source.iter().zip(&nn_s).map(|(x, &j)| 2.0 * (x - target[j])).collect();
    for (y, &i) in target.iter().zip(&nn_t) {
        grad[i] += 2.0 * (source[i] - y);
    }
    (a + b, grad)
}

/// Mean squared nearest distance in both directions, rooted: a per-point
/// RMS form of the Chamfer distance in length units.
pub fn chamfer_rms(source: &[Vec3], target: &[Vec3]) -> Result<f64> {
    Ok((chamfer(source, target)? / (source.len() + target.len()) as f64).sqrt())
}

#[cfg(test)]
pub(crate) fn brute_force(source: &[Vec3], target: &[Vec3]) -> f64 {
    use crate::mesh::kdtree::dist2;
    let side = |from: &[Vec3], to: &[Vec3]| {
        from.iter()
            .map(|x| to.iter().map(|y| dist2(x, y)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
    };
    side(source, target) + side(target, source)
}
