//! Quadrature rules: Gauss–Legendre (plain and geometrically graded) and
//! symmetric simplex rules in barycentric form.

use std::f64::consts::PI;

/// Gauss–Legendre rule on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss–Legendre needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Newton iteration on P_n from the Chebyshev-like initial guess.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            // map [-1, 1] -> [0, 1]
            nodes[i] = 0.5 * (1.0 - x);
            nodes[n - 1 - i] = 0.5 * (1.0 + x);
            weights[i] = 0.5 * w;
            weights[n - 1 - i] = 0.5 * w;
        }
        Self { nodes, weights }
    }

    /// Integrate `f` over `[a, b]`.
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let len = b - a;
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(a + len * x))
            .sum::<f64>()
            * len
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let dp = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, dp)
}

/// Composite Gauss rule on `[0, 1]` graded geometrically towards 0, for
/// integrands with an integrable (log or algebraic) endpoint singularity.
#[derive(Debug, Clone)]
pub struct GradedRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GradedRule {
    pub fn new(levels: usize, ratio: f64, per_level: usize) -> Self {
        let base = GaussLegendre::new(per_level);
        let mut nodes = Vec::with_capacity(levels * per_level + per_level);
        let mut weights = Vec::with_capacity(nodes.capacity());
        let mut hi = 1.0;
        for level in 0..=levels {
            let lo = if level == levels { 0.0 } else { hi * ratio };
            for (x, w) in base.nodes.iter().zip(&base.weights) {
                nodes.push(lo + (hi - lo) * x);
                weights.push((hi - lo) * w);
            }
            hi = lo;
        }
        Self { nodes, weights }
    }

    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let len = b - a;
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(a + len * x))
            .sum::<f64>()
            * len
    }
}

/// A simplex quadrature rule in barycentric coordinates; weights sum to 1 so
/// the integral is `measure * sum(w_q f(x_q))`.
#[derive(Debug, Clone)]
pub struct SimplexRule {
    pub barycentric: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl SimplexRule {
    /// Degree-2 rule: 3 points on triangles, 4 on tetrahedra.
    pub fn degree2(dim: usize) -> Self {
        match dim {
            1 => {
                let a = 0.5 - 0.5 / 3f64.sqrt();
                Self {
                    barycentric: vec![vec![1.0 - a, a], vec![a, 1.0 - a]],
                    weights: vec![0.5, 0.5],
                }
            }
            2 => {
                let (a, b) = (2.0 / 3.0, 1.0 / 6.0);
                Self {
                    barycentric: vec![vec![a, b, b], vec![b, a, b], vec![b, b, a]],
                    weights: vec![1.0 / 3.0; 3],
                }
            }
            3 => {
                let a = 0.585_410_196_624_968_5;
                let b = 0.138_196_601_125_010_5;
                Self {
                    barycentric: (0..4)
                        .map(|i| (0..4).map(|j| if i == j { a } else { b }).collect())
                        .collect(),
                    weights: vec![0.25; 4],
                }
            }
            _ => panic!("no simplex rule for dimension {dim}"),
        }
    }

    /// Higher-order rule for error norms: degree 5 (7 points) on triangles,
    /// degree 3 (5 points) on tetrahedra.
    pub fn high_order(dim: usize) -> Self {
        match dim {
            1 => {
                let g = GaussLegendre::new(4);
                Self {
                    barycentric: g.nodes.iter().map(|&x| vec![1.0 - x, x]).collect(),
                    weights: g.weights.clone(),
                }
            }
            2 => {
                let s15 = 15f64.sqrt();
                let a1 = (6.0 - s15) / 21.0;
                let a2 = (6.0 + s15) / 21.0;
                let w1 = (155.0 - s15) / 1200.0;
                let w2 = (155.0 + s15) / 1200.0;
                let mut barycentric = vec![vec![1.0 / 3.0; 3]];
                let mut weights = vec![9.0 / 40.0];
                for (a, w) in [(a1, w1), (a2, w2)] {
                    let b = 1.0 - 2.0 * a;
                    barycentric.push(vec![b, a, a]);
                    barycentric.push(vec![a, b, a]);
                    barycentric.push(vec![a, a, b]);
                    weights.extend([w, w, w]);
                }
                Self { barycentric, weights }
            }
            3 => {
                let mut barycentric = vec![vec![0.25; 4]];
                let mut weights = vec![-0.8];
                for i in 0..4 {
                    barycentric.push((0..4).map(|j| if i == j { 0.5 } else { 1.0 / 6.0 }).collect());
                    weights.push(0.45);
                }
                Self { barycentric, weights }
            }
            _ => panic!("no simplex rule for dimension {dim}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_is_exact_for_polynomials() {
        let g = GaussLegendre::new(5);
        for p in 0..10 {
            let v = g.integrate(0.0, 2.0, |x| x.powi(p));
            let exact = 2f64.powi(p + 1) / (p + 1) as f64;
            assert!((v - exact).abs() < 1e-12 * exact.max(1.0), "p={p}");
        }
        assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn graded_rule_handles_log_singularity() {
        let r = GradedRule::new(36, 0.35, 10);
        let v = r.integrate(0.0, 1.0, |x| x.ln());
        assert!((v + 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn simplex_rules_reach_their_degree() {
        // integral of x^a y^b over the unit triangle = a! b! / (a+b+2)!
        let fact = |n: u32| (1..=n).map(f64::from).product::<f64>();
        for (rule, deg) in [(SimplexRule::degree2(2), 2), (SimplexRule::high_order(2), 5)] {
            for a in 0..=deg {
                for b in 0..=(deg - a) {
                    let v: f64 = rule
                        .barycentric
                        .iter()
                        .zip(&rule.weights)
                        .map(|(l, w)| w * l[1].powi(a as i32) * l[2].powi(b as i32))
                        .sum::<f64>()
                        * 0.5;
                    let exact = fact(a) * fact(b) / fact(a + b + 2);
                    assert!((v - exact).abs() < 1e-14, "a={a} b={b}");
                }
            }
        }
        for (rule, deg) in [(SimplexRule::degree2(3), 2u32), (SimplexRule::high_order(3), 3)] {
            for a in 0..=deg {
                let v: f64 = rule
                    .barycentric
                    .iter()
                    .zip(&rule.weights)
                    .map(|(l, w)| w * l[1].powi(a as i32))
                    .sum::<f64>()
                    / 6.0;
                let exact = fact(a) * 6.0 / fact(a + 3) / 6.0;
                assert!((v - exact).abs() < 1e-14, "tet a={a}: {v} vs {exact}");
            }
        }
    }
}
