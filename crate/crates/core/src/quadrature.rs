//! Gauss–Legendre rules on `[0, 1]` and the interpolatory cumulative
//! integration matrix built on the same nodes.

use std::f64::consts::PI;

/// An `n`-point Gauss–Legendre rule mapped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Nodes are returned in increasing order. Exact for polynomials of
    /// degree `2n - 1`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "at least one quadrature node is required");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Tricomi initial guess, then Newton on P_n
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            // map [-1, 1] -> [0, 1]; x is the larger root of the pair
            nodes[n - 1 - i] = 0.5 * (1.0 + x);
            nodes[i] = 0.5 * (1.0 - x);
            weights[n - 1 - i] = 0.5 * w;
            weights[i] = 0.5 * w;
        }
        GaussLegendre { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `∫₀¹ f`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// `S[a][b] = ∫₀^{r_a} ℓ_b(s) ds`, where `ℓ_b` are the Lagrange basis
    /// polynomials on the nodes and `r_a` ranges over `targets`.
    ///
    /// Applied to samples of `g` at the nodes, row `a` integrates the degree
    /// `n - 1` interpolant of `g` from 0 to `r_a`. For `r_a = 1` the row
    /// equals the Gauss–Legendre weights.
    pub fn cumulative_matrix(&self, targets: &[f64]) -> Vec<Vec<f64>> {
        let n = self.len();
        let bary: Vec<f64> = (0..n)
            .map(|j| {
                let prod: f64 = (0..n)
                    .filter(|&k| k != j)
                    .map(|k| self.nodes[j] - self.nodes[k])
                    .product();
                1.0 / prod
            })
            .collect();
        let lagrange = |b: usize, s: f64| -> f64 {
            let mut v = bary[b];
            for k in 0..n {
                if k != b {
                    v *= s - self.nodes[k];
                }
            }
            v
        };
        targets
            .iter()
            .map(|&r| {
                (0..n)
                    .map(|b| {
                        // same rule on [0, r] integrates the degree n-1 basis exactly
                        r * self.integrate(|u| lagrange(b, r * u))
                    })
                    .collect()
            })
            .collect()
    }
}

/// `(P_n(x), P_n'(x))`.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        for n in 1..=16 {
            let g = GaussLegendre::new(n);
            let s: f64 = g.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-14, "n={n}: {s}");
            assert!(g.nodes.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn exact_up_to_degree_2n_minus_1() {
        for n in 1..=12 {
            let g = GaussLegendre::new(n);
            for d in 0..(2 * n) {
                let got = g.integrate(|x| x.powi(d as i32));
                let want = 1.0 / (d as f64 + 1.0);
                assert!((got - want).abs() < 1e-14, "n={n} d={d}");
            }
        }
    }

    #[test]
    fn eight_point_nodes_match_reference() {
        // reference abscissae on [-1, 1]
        let g = GaussLegendre::new(8);
        let x = 2.0 * g.nodes[7] - 1.0;
        assert!((x - 0.960_289_856_497_536_2).abs() < 1e-15);
        assert!((2.0 * g.weights[7] - 0.101_228_536_290_376_26).abs() < 1e-15);
    }

    #[test]
    fn cumulative_matrix_integrates_polynomials() {
        let g = GaussLegendre::new(6);
        let targets: Vec<f64> = g.nodes.iter().copied().chain([1.0, 0.37]).collect();
        let s = g.cumulative_matrix(&targets);
        // degree-5 polynomial is reproduced exactly by the 6-node interpolant
        let p = |x: f64| 1.0 - 2.0 * x + 3.0 * x.powi(3) - x.powi(5);
        let pint = |x: f64| x - x * x + 0.75 * x.powi(4) - x.powi(6) / 6.0;
        let samples: Vec<f64> = g.nodes.iter().map(|&x| p(x)).collect();
        for (row, &r) in s.iter().zip(&targets) {
            let got: f64 = row.iter().zip(&samples).map(|(a, b)| a * b).sum();
            assert!((got - pint(r)).abs() < 1e-13, "r={r}");
        }
        for (a, b) in s[6].iter().zip(&g.weights) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
