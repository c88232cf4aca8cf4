//! Exact medoids with triangle-inequality pruning.

use crate::scene_model::Vec3;

pub trait MetricPoint: Copy {
    fn dist(&self, other: &Self) -> f64;
    fn mean(points: &[Self]) -> Self;
}

impl MetricPoint for Vec3 {
    fn dist(&self, other: &Self) -> f64 {
        (self - other).norm()
    }

    fn mean(points: &[Self]) -> Self {
        points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len() as f64
    }
}

impl MetricPoint for [f64; 2] {
    fn dist(&self, other: &Self) -> f64 {
        (self[0] - other[0]).hypot(self[1] - other[1])
    }

    fn mean(points: &[Self]) -> Self {
        let n = points.len() as f64;
        let (a, b) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        [a / n, b / n]
    }
}

fn total_distance<P: MetricPoint>(points: &[P], i: usize, dist: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    for (k, q) in points.iter().enumerate() {
        let d = points[i].dist(q);
        dist[k] = d;
        sum += d;
    }
    sum
}

/// Index of the member minimizing the summed distance to all members;
/// ties go to the lowest index. `None` for an empty slice.
///
/// Candidates are visited nearest-to-mean first, and any candidate whose lower
/// bound `|E(i) - n d(i, j)|` exceeds the best total is skipped.
pub fn medoid<P: MetricPoint>(points: &[P]) -> Option<usize> {
    let n = points.len();
    match n {
        0 => return None,
        1 | 2 => return Some(0),
        _ => {}
    }
    let center = P::mean(points);
    let mut order: Vec<usize> = (0..n).collect();
    let to_center: Vec<f64> = points.iter().map(|p| p.dist(&center)).collect();
    order.sort_by(|&a, &b| to_center[a].total_cmp(&to_center[b]).then(a.cmp(&b)));

    let mut lower = vec![0.0f64; n];
    let mut dist = vec![0.0f64; n];
    let mut best = (f64::INFINITY, usize::MAX);
    let nf = n as f64;
    for &i in &order {
        // Slack keeps exact ties from being pruned by rounding in the bound.
        if lower[i] > best.0 + 1e-9 * (1.0 + best.0) {
            continue;
        }
        let e = total_distance(points, i, &mut dist);
        if e < best.0 || (e == best.0 && i < best.1) {
            best = (e, i);
        }
        for (lb, d) in lower.iter_mut().zip(&dist) {
            let b = (e - nf * d).abs();
            if b > *lb {
                *lb = b;
            }
        }
    }
    Some(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute<P: MetricPoint>(points: &[P]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for i in 0..points.len() {
            let e: f64 = points.iter().map(|q| points[i].dist(q)).sum();
            if e < best.0 {
                best = (e, i);
            }
        }
        best.1
    }

    #[test]
    fn five_known_pixels() {
        let pts = [[0.0, 0.0], [10.0, 0.0], [4.0, 1.0], [5.0, 9.0], [3.0, 2.0]];
        assert_eq!(medoid(&pts), Some(brute(&pts)));
        assert_eq!(medoid(&pts), Some(4));
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(medoid::<[f64; 2]>(&[]), None);
        assert_eq!(medoid(&[[3.0, 3.0]; 6]), Some(0));
    }

    proptest! {
        #[test]
        fn matches_brute_force_2d(pts in prop::collection::vec((0i32..40, 0i32..40), 1..80)) {
            let pts: Vec<[f64; 2]> = pts.into_iter().map(|(a, b)| [a as f64, b as f64]).collect();
            let got = medoid(&pts).unwrap();
            let e = |i: usize| pts.iter().map(|q| pts[i].dist(q)).sum::<f64>();
            // Integer grids produce exact ties; compare totals and the tie rule.
            prop_assert!((e(got) - e(brute(&pts))).abs() < 1e-9);
            prop_assert!(got <= brute(&pts) || e(got) < e(brute(&pts)) - 1e-9);
        }

        #[test]
        fn matches_brute_force_3d(pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..60)) {
            let pts: Vec<Vec3> = pts.into_iter().map(Vec3::from).collect();
            prop_assert_eq!(medoid(&pts).unwrap(), brute(&pts));
        }
    }
}
