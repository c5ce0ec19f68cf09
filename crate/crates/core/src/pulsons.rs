//! Pulson (singular momentum) solutions of EPDiff.
//!
//! With `p(t) = sum_a P_a delta(x - Q_a)` the geodesic equations reduce to an
//! ODE for the positions and momenta,
//!
//! ```text
//! dQ_a/dt =  sum_b P_b k(Q_a, Q_b)
//! dP_a/dt = -sum_b (P_a . P_b) grad_{Q_a} k(Q_a, Q_b)
//! ```
//!
//! for right-invariant dynamics. The left-invariant equations have both signs
//! flipped, i.e. they are the right equations run backwards in time. On left
//! trajectories `Q_a` is best read as an anti-particle location in body
//! coordinates.
//!
//! `H = sum_{a,b} (P_a . P_b) k(Q_a, Q_b)` is conserved by both.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq)]
pub struct PulsonState {
    q: Vec<Point>,
    p: Vec<Point>,
}

impl PulsonState {
    pub fn new(q: Vec<Point>, p: Vec<Point>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InvalidData("need at least one pulson".into()));
        }
        if q.len() != p.len() {
            return Err(Error::InvalidData(format!(
                "{} positions but {} momenta",
                q.len(),
                p.len()
            )));
        }
        let s = Self { q, p };
        if !s.is_finite() {
            return Err(Error::InvalidData("non-finite pulson coordinate".into()));
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn positions(&self) -> &[Point] {
        &self.q
    }

    pub fn momenta(&self) -> &[Point] {
        &self.p
    }

    fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.p).flatten().all(|x| x.is_finite())
    }

    /// Mirror image about the y-axis: `x -> -x` for positions and momenta.
    pub fn reflected(&self) -> Self {
        let flip = |v: &Vec<Point>| v.iter().map(|&[x, y]| [-x, y]).collect();
        Self {
            q: flip(&self.q),
            p: flip(&self.p),
        }
    }

    /// Largest coordinate difference to another state of the same size.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.q
            .iter()
            .chain(&self.p)
            .zip(other.q.iter().chain(&other.p))
            .flat_map(|(a, b)| [(a[0] - b[0]).abs(), (a[1] - b[1]).abs()])
            .fold(0.0, f64::max)
    }

    /// `self + h * d`, componentwise.
    fn axpy(&self, h: f64, d: &Self) -> Self {
        let add = |a: &[Point], b: &[Point]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| [x[0] + h * y[0], x[1] + h * y[1]])
                .collect()
        };
        Self {
            q: add(&self.q, &d.q),
            p: add(&self.p, &d.p),
        }
    }
}

/// Scalar kernel `k(q, q')` normalized to `k(q, q) = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScalarKernel {
    Gaussian { sigma: f64 },
}

impl ScalarKernel {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidKernel(format!(
                "gaussian sigma must be positive, got {sigma}"
            )));
        }
        Ok(ScalarKernel::Gaussian { sigma })
    }

    pub fn eval(&self, a: Point, b: Point) -> f64 {
        match *self {
            ScalarKernel::Gaussian { sigma } => {
                let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
                (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
            }
        }
    }

    /// Gradient with respect to the first argument.
    pub fn grad(&self, a: Point, b: Point) -> Point {
        match *self {
            ScalarKernel::Gaussian { sigma } => {
                let k = self.eval(a, b);
                let s2 = sigma * sigma;
                [-(a[0] - b[0]) / s2 * k, -(a[1] - b[1]) / s2 * k]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            other => Err(Error::InvalidConfig(format!(
                "side must be `left` or `right`, got `{other}`"
            ))),
        }
    }
}

pub fn hamiltonian(s: &PulsonState, k: &ScalarKernel) -> f64 {
    let mut h = 0.0;
    for (qa, pa) in s.q.iter().zip(&s.p) {
        for (qb, pb) in s.q.iter().zip(&s.p) {
            h += (pa[0] * pb[0] + pa[1] * pb[1]) * k.eval(*qa, *qb);
        }
    }
    h
}

pub fn rhs_right(s: &PulsonState, k: &ScalarKernel) -> PulsonState {
    let n = s.len();
    let mut dq = vec![[0.0; 2]; n];
    let mut dp = vec![[0.0; 2]; n];
    for a in 0..n {
        let (qa, pa) = (s.q[a], s.p[a]);
        for b in 0..n {
            let (qb, pb) = (s.q[b], s.p[b]);
            let kab = k.eval(qa, qb);
            dq[a][0] += pb[0] * kab;
            dq[a][1] += pb[1] * kab;
            let dot = pa[0] * pb[0] + pa[1] * pb[1];
            let g = k.grad(qa, qb);
            dp[a][0] -= dot * g[0];
            dp[a][1] -= dot * g[1];
        }
    }
    PulsonState { q: dq, p: dp }
}

pub fn rhs_left(s: &PulsonState, k: &ScalarKernel) -> PulsonState {
    let r = rhs_right(s, k);
    let neg = |v: Vec<Point>| v.into_iter().map(|[x, y]| [-x, -y]).collect();
    PulsonState {
        q: neg(r.q),
        p: neg(r.p),
    }
}

pub fn total_momentum(s: &PulsonState) -> Point {
    s.p.iter()
        .fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub side: Side,
    pub times: Vec<f64>,
    pub states: Vec<PulsonState>,
}

impl Trajectory {
    pub fn last(&self) -> &PulsonState {
        self.states.last().expect("trajectory is nonempty")
    }

    pub fn hamiltonians(&self, k: &ScalarKernel) -> Vec<f64> {
        self.states.iter().map(|s| hamiltonian(s, k)).collect()
    }

    /// `max_t |H(t) - H(0)| / |H(0)|`; absolute drift when `H(0) = 0`.
    pub fn max_relative_drift(&self, k: &ScalarKernel) -> f64 {
        let h = self.hamiltonians(k);
        let scale = if h[0] == 0.0 { 1.0 } else { h[0].abs() };
        h.iter().map(|x| (x - h[0]).abs() / scale).fold(0.0, f64::max)
    }

    /// Largest `|sum_a P_a(t) - sum_a P_a(0)|` component.
    pub fn max_momentum_drift(&self) -> f64 {
        let p0 = total_momentum(&self.states[0]);
        self.states
            .iter()
            .map(|s| {
                let p = total_momentum(s);
                (p[0] - p0[0]).abs().max((p[1] - p0[1]).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Columns `t,a,Qx,Qy,Px,Py,H`, one row per pulson per time.
    pub fn to_csv(&self, k: &ScalarKernel) -> String {
        let mut out = String::from("t,a,Qx,Qy,Px,Py,H\n");
        for (t, s) in self.times.iter().zip(&self.states) {
            let h = hamiltonian(s, k);
            for (a, (q, p)) in s.q.iter().zip(&s.p).enumerate() {
                writeln!(
                    out,
                    "{t:e},{a},{:e},{:e},{:e},{:e},{h:e}",
                    q[0], q[1], p[0], p[1]
                )
                .expect("write to string");
            }
        }
        out
    }
}

/// Classical RK4 over `[0, t_final]` in `n_steps` equal steps. A negative
/// `t_final` integrates backwards.
pub fn shoot(
    s0: &PulsonState,
    k: &ScalarKernel,
    side: Side,
    t_final: f64,
    n_steps: usize,
) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::InvalidConfig("n_steps must be at least 1".into()));
    }
    if !t_final.is_finite() {
        return Err(Error::InvalidConfig(format!("duration {t_final} is not finite")));
    }
    let rhs = match side {
        Side::Right => rhs_right,
        Side::Left => rhs_left,
    };
    let h = t_final / n_steps as f64;
    let half = 0.5 * h;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut times = Vec::with_capacity(n_steps + 1);
    states.push(s0.clone());
    times.push(0.0);
    let mut s = s0.clone();
    for step in 1..=n_steps {
        let k1 = rhs(&s, k);
        let k2 = rhs(&s.axpy(half, &k1), k);
        let k3 = rhs(&s.axpy(half, &k2), k);
        let k4 = rhs(&s.axpy(h, &k3), k);
        let combo = |a: &[Point], b: &[Point], c: &[Point], d: &[Point]| -> Vec<Point> {
            (0..a.len())
                .map(|i| {
                    [
                        a[i][0] + 2.0 * b[i][0] + 2.0 * c[i][0] + d[i][0],
                        a[i][1] + 2.0 * b[i][1] + 2.0 * c[i][1] + d[i][1],
                    ]
                })
                .collect()
        };
        let incr = PulsonState {
            q: combo(&k1.q, &k2.q, &k3.q, &k4.q),
            p: combo(&k1.p, &k2.p, &k3.p, &k4.p),
        };
        s = s.axpy(h / 6.0, &incr);
        if !s.is_finite() {
            return Err(Error::NonFinite { step });
        }
        states.push(s.clone());
        times.push(step as f64 * h);
    }
    Ok(Trajectory { side, times, states })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: Point) -> PulsonState {
        PulsonState::new(vec![[0.5, -1.0]], vec![p]).unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        let k = ScalarKernel::gaussian(1.0).unwrap();
        assert_eq!(hamiltonian(&single([0.0, 0.0]), &k), 0.0);
        assert_eq!(hamiltonian(&single([1.0, 0.0]), &k), 1.0);
        let s = PulsonState::new(vec![[0.0, 0.0], [10.0, 0.0]], vec![[1.0, 0.0], [0.0, 2.0]]).unwrap();
        assert!((hamiltonian(&s, &k) - 5.0).abs() < 1e-20);
    }

    #[test]
    fn kernel_normalization() {
        let k = ScalarKernel::gaussian(2.0).unwrap();
        assert_eq!(k.eval([1.0, 3.0], [1.0, 3.0]), 1.0);
        assert_eq!(k.grad([1.0, 3.0], [1.0, 3.0]), [0.0, 0.0]);
        let (a, b, e) = ([0.3, -0.2], [1.1, 0.4], 1e-6);
        let fd = (k.eval([a[0] + e, a[1]], b) - k.eval([a[0] - e, a[1]], b)) / (2.0 * e);
        assert!((fd - k.grad(a, b)[0]).abs() < 1e-9);
        assert!(ScalarKernel::gaussian(0.0).is_err());
    }

    #[test]
    fn single_pulson_rhs() {
        let k = ScalarKernel::gaussian(1.0).unwrap();
        let s = single([1.0, 0.5]);
        let r = rhs_right(&s, &k);
        assert_eq!(r.q, vec![[1.0, 0.5]]);
        assert_eq!(r.p, vec![[0.0, 0.0]]);
        let l = rhs_left(&s, &k);
        assert_eq!(l.q, vec![[-1.0, -0.5]]);
        let z = rhs_right(&single([0.0, 0.0]), &k);
        assert_eq!(z.q, vec![[0.0, 0.0]]);
        assert_eq!(z.p, vec![[0.0, 0.0]]);
    }

    #[test]
    fn left_is_negated_right() {
        let k = ScalarKernel::gaussian(1.3).unwrap();
        let s = PulsonState::new(
            vec![[0.0, 0.0], [1.0, 0.5], [-0.7, 2.0]],
            vec![[1.0, -0.2], [0.3, 0.9], [-0.5, 0.1]],
        )
        .unwrap();
        let (r, l) = (rhs_right(&s, &k), rhs_left(&s, &k));
        for (a, b) in r.q.iter().chain(&r.p).zip(l.q.iter().chain(&l.p)) {
            assert_eq!(a[0], -b[0]);
            assert_eq!(a[1], -b[1]);
        }
    }

    #[test]
    fn single_pulson_moves_straight() {
        let k = ScalarKernel::gaussian(1.0).unwrap();
        let s = PulsonState::new(vec![[0.0, 0.0]], vec![[1.0, 0.0]]).unwrap();
        let t = shoot(&s, &k, Side::Right, 1.0, 10).unwrap();
        let q = t.last().positions()[0];
        assert!((q[0] - 1.0).abs() < 1e-12 && q[1] == 0.0);
        assert_eq!(t.last().momenta()[0], [1.0, 0.0]);
        assert_eq!(t.states.len(), 11);
        let l = shoot(&s, &k, Side::Left, 1.0, 10).unwrap();
        assert!((l.last().positions()[0][0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(PulsonState::new(vec![], vec![]).is_err());
        assert!(PulsonState::new(vec![[0.0, 0.0]], vec![]).is_err());
        assert!(PulsonState::new(vec![[f64::NAN, 0.0]], vec![[0.0, 0.0]]).is_err());
        let k = ScalarKernel::gaussian(1.0).unwrap();
        assert!(shoot(&single([1.0, 0.0]), &k, Side::Right, 1.0, 0).is_err());
        assert_eq!("left".parse::<Side>().unwrap(), Side::Left);
        assert!("up".parse::<Side>().is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        let k = ScalarKernel::gaussian(1.0).unwrap();
        let s = PulsonState::new(vec![[0.0, 0.0]], vec![[1e300, 0.0]]).unwrap();
        assert!(matches!(
            shoot(&s, &k, Side::Right, 1e10, 1),
            Err(Error::NonFinite { step: 1 })
        ));
    }

    #[test]
    fn csv_layout() {
        let k = ScalarKernel::gaussian(1.0).unwrap();
        let t = shoot(&single([1.0, 0.0]), &k, Side::Right, 1.0, 2).unwrap();
        let csv = t.to_csv(&k);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,a,Qx,Qy,Px,Py,H");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0e0,0,"));
    }
}
