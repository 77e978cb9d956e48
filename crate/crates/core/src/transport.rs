//! Transport of the density increment along base-space paths.
//!
//! The flux covector field `wp_i(y)` determines how much probability is
//! carried along a curve: `dP = wp_i dy^i`. Line integrals here use midpoint
//! quadrature per segment, which keeps concatenation additivity and
//! reversal antisymmetry exact up to summation order. A non-exact field has
//! nonzero loop integrals; [`path_dependence_experiment`] demonstrates how
//! two routes between the same endpoints disagree by exactly the holonomy
//! of the enclosing loop.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// A parameterized path in the base space, stored as nodes with strictly
/// increasing parameter values.
#[derive(Debug, Clone)]
pub struct BasePath {
    params: Vec<f64>,
    nodes: Vec<Vec<f64>>,
}

impl BasePath {
    pub fn new(params: Vec<f64>, nodes: Vec<Vec<f64>>) -> Result<Self> {
        if params.len() != nodes.len() || nodes.len() < 2 {
            return Err(Error::Contract(
                "path needs matching params and at least 2 nodes".into(),
            ));
        }
        let dim = nodes[0].len();
        if dim == 0 || nodes.iter().any(|p| p.len() != dim) {
            return Err(Error::Contract("path nodes must share a dimension".into()));
        }
        if params.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Contract("path parameters must increase".into()));
        }
        for (w, s) in nodes.windows(2).zip(params.windows(2)) {
            if w[0] == w[1] {
                return Err(Error::Contract(format!(
                    "consecutive nodes coincide at s = {}..{}",
                    s[0], s[1]
                )));
            }
        }
        if nodes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "path nodes".into(),
            });
        }
        Ok(Self { params, nodes })
    }

    /// Piecewise-linear path through `corners`, each edge split into
    /// `segments_per_edge` equal segments, parameterized by arc index.
    pub fn polyline(corners: &[Vec<f64>], segments_per_edge: usize) -> Result<Self> {
        if corners.len() < 2 || segments_per_edge == 0 {
            return Err(Error::Contract(
                "polyline needs 2 corners and segments".into(),
            ));
        }
        let mut params = Vec::new();
        let mut nodes = Vec::new();
        params.push(0.0);
        nodes.push(corners[0].clone());
        for (e, pair) in corners.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            for k in 1..=segments_per_edge {
                let frac = k as f64 / segments_per_edge as f64;
                params.push(e as f64 + frac);
                if k == segments_per_edge {
                    // land on the corner exactly so junctions compare equal
                    nodes.push(b.clone());
                } else {
                    nodes.push(a.iter().zip(b).map(|(x, y)| x + frac * (y - x)).collect());
                }
            }
        }
        Self::new(params, nodes)
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Paths are never empty; present for container-API symmetry.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn is_closed(&self) -> bool {
        self.nodes.first() == self.nodes.last()
    }

    /// The same geometric path traversed backwards.
    pub fn reversed(&self) -> Self {
        let s_max = *self.params.last().unwrap();
        let params: Vec<f64> = self.params.iter().rev().map(|s| s_max - s).collect();
        Self {
            params,
            nodes: self.nodes.iter().rev().cloned().collect(),
        }
    }

    /// `self` followed by `other` (first node of `other` must equal the
    /// last node of `self`).
    pub fn concat(&self, other: &BasePath) -> Result<Self> {
        if self.nodes.last() != other.nodes.first() {
            return Err(Error::Contract("paths do not share a junction node".into()));
        }
        let offset = self.params.last().unwrap() - other.params.first().unwrap();
        let mut params = self.params.clone();
        let mut nodes = self.nodes.clone();
        for (s, node) in other.params.iter().zip(&other.nodes).skip(1) {
            params.push(s + offset);
            nodes.push(node.clone());
        }
        Self::new(params, nodes)
    }
}

type FluxFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A covector field `y -> (wp_1(y), .., wp_n(y))` on the base space.
pub struct FluxField {
    dim: usize,
    wp: Box<FluxFn>,
    /// Caller's promise that the field is a gradient; informational only.
    pub exact_hint: bool,
}

impl FluxField {
    pub fn new<F>(dim: usize, wp: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            wp: Box::new(wp),
            exact_hint: false,
        }
    }

    pub fn with_exact_hint(mut self) -> Self {
        self.exact_hint = true;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, y: &[f64]) -> Result<Vec<f64>> {
        let v = (self.wp)(y);
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("flux field at {y:?}"),
            });
        }
        Ok(v)
    }
}

/// Result of transporting the density increment along a path.
#[derive(Debug, Clone, Serialize)]
pub struct TransportResult {
    /// Total increment; equals the sum of the per-segment increments.
    pub delta_p: f64,
    pub increments: Vec<f64>,
    pub quadrature: &'static str,
}

impl TransportResult {
    /// Path CSV with columns `s,y1..yn,dP_cum`.
    pub fn write_csv<W: Write>(&self, path: &BasePath, mut w: W) -> std::io::Result<()> {
        let n = path.dim();
        let mut header = String::from("s");
        for i in 1..=n {
            header.push_str(&format!(",y{i}"));
        }
        header.push_str(",dP_cum");
        writeln!(w, "{header}")?;
        let mut cumulative = 0.0;
        for (k, (s, node)) in path.params().iter().zip(path.nodes()).enumerate() {
            if k > 0 {
                cumulative += self.increments[k - 1];
            }
            let mut line = format!("{s}");
            for v in node {
                line.push_str(&format!(",{v}"));
            }
            line.push_str(&format!(",{cumulative}"));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Midpoint-quadrature line integral of the flux field along the path.
pub fn transport(wp: &FluxField, path: &BasePath) -> Result<TransportResult> {
    if wp.dim() != path.dim() {
        return Err(Error::DimensionMismatch {
            expected: wp.dim(),
            actual: path.dim(),
        });
    }
    let mut increments = Vec::with_capacity(path.len() - 1);
    let mut total = 0.0;
    for (segment, pair) in path.nodes().windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        let mid: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
        let field = wp.eval(&mid).map_err(|e| Error::Segment {
            segment,
            reason: e.to_string(),
        })?;
        let increment: f64 = field
            .iter()
            .zip(a.iter().zip(b))
            .map(|(f, (x, y))| f * (y - x))
            .sum();
        increments.push(increment);
        total += increment;
    }
    Ok(TransportResult {
        delta_p: total,
        increments,
        quadrature: "midpoint",
    })
}

/// Loop integral of the flux field around a closed path.
pub fn loop_holonomy(wp: &FluxField, looped: &BasePath) -> Result<f64> {
    if !looped.is_closed() {
        return Err(Error::Contract("holonomy requires a closed path".into()));
    }
    Ok(transport(wp, looped)?.delta_p)
}

/// Outcome of comparing two routes between the same endpoints.
#[derive(Debug, Clone, Serialize)]
pub struct PathDependenceReport {
    pub delta_first: f64,
    pub delta_second: f64,
    /// `delta_first - delta_second`.
    pub difference: f64,
    /// Holonomy of the loop formed by the first route and the reversed second.
    pub loop_value: f64,
    /// `|difference - loop_value|`; a quadrature-consistency identity.
    pub consistency_gap: f64,
}

/// Transport along `A -> B -> C` and `A -> B' -> C` and report how the
/// final increments differ. The difference equals the holonomy of the
/// concatenated loop.
pub fn path_dependence_experiment(
    wp: &FluxField,
    a: &[f64],
    b: &[f64],
    b_alt: &[f64],
    c: &[f64],
    segments_per_edge: usize,
) -> Result<PathDependenceReport> {
    let first = BasePath::polyline(&[a.to_vec(), b.to_vec(), c.to_vec()], segments_per_edge)?;
    let second = BasePath::polyline(&[a.to_vec(), b_alt.to_vec(), c.to_vec()], segments_per_edge)?;
    let delta_first = transport(wp, &first)?.delta_p;
    let delta_second = transport(wp, &second)?.delta_p;
    let looped = first.concat(&second.reversed())?;
    let loop_value = loop_holonomy(wp, &looped)?;
    let difference = delta_first - delta_second;
    Ok(PathDependenceReport {
        delta_first,
        delta_second,
        difference,
        loop_value,
        consistency_gap: (difference - loop_value).abs(),
    })
}

/// Certify that a sampled density series is the horizontal lift of the
/// path: returns `max_k |dP_k - wp_i(mid_k) dy^i_k|` over segments.
pub fn horizontal_residual(wp: &FluxField, path: &BasePath, p_series: &[f64]) -> Result<f64> {
    if p_series.len() != path.len() {
        return Err(Error::Contract(format!(
            "P series has {} values for {} path nodes",
            p_series.len(),
            path.len()
        )));
    }
    let increments = transport(wp, path)?.increments;
    let mut worst = 0.0f64;
    for (k, inc) in increments.iter().enumerate() {
        let dp = p_series[k + 1] - p_series[k];
        worst = worst.max((dp - inc).abs());
    }
    Ok(worst)
}

/// Integral of the curl `d(wp) = (d wp_2/d y^1 - d wp_1/d y^2)` over the
/// region enclosed by a planar polygon, by fan triangulation and the
/// three-point midedge rule (exact for quadratic integrands) with
/// subdivision. The partial derivatives use central differences with the
/// given step. Serves as the surface side of Stokes checks.
pub fn surface_curl_integral(
    wp: &FluxField,
    polygon: &[Vec<f64>],
    fd_step: f64,
    subdivisions: usize,
) -> Result<f64> {
    if wp.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            actual: wp.dim(),
        });
    }
    if polygon.len() < 3 {
        return Err(Error::Contract("polygon needs at least 3 vertices".into()));
    }
    let curl = |y: &[f64]| -> Result<f64> {
        let d1 = {
            let plus = wp.eval(&[y[0] + fd_step, y[1]])?;
            let minus = wp.eval(&[y[0] - fd_step, y[1]])?;
            (plus[1] - minus[1]) / (2.0 * fd_step)
        };
        let d2 = {
            let plus = wp.eval(&[y[0], y[1] + fd_step])?;
            let minus = wp.eval(&[y[0], y[1] - fd_step])?;
            (plus[0] - minus[0]) / (2.0 * fd_step)
        };
        Ok(d1 - d2)
    };
    // signed triangle quadrature: midedge rule on 4^subdivisions pieces
    fn triangle_integral(
        curl: &dyn Fn(&[f64]) -> Result<f64>,
        a: [f64; 2],
        b: [f64; 2],
        c: [f64; 2],
        depth: usize,
    ) -> Result<f64> {
        let mab = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        let mbc = [(b[0] + c[0]) / 2.0, (b[1] + c[1]) / 2.0];
        let mca = [(c[0] + a[0]) / 2.0, (c[1] + a[1]) / 2.0];
        if depth == 0 {
            let signed_area = 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]));
            let avg = (curl(&mab)? + curl(&mbc)? + curl(&mca)?) / 3.0;
            return Ok(signed_area * avg);
        }
        Ok(triangle_integral(curl, a, mab, mca, depth - 1)?
            + triangle_integral(curl, mab, b, mbc, depth - 1)?
            + triangle_integral(curl, mca, mbc, c, depth - 1)?
            + triangle_integral(curl, mab, mbc, mca, depth - 1)?)
    }
    let root = [polygon[0][0], polygon[0][1]];
    let mut total = 0.0;
    for pair in polygon.windows(2).skip(1) {
        let b = [pair[0][0], pair[0][1]];
        let c = [pair[1][0], pair[1][1]];
        total += triangle_integral(&curl, root, b, c, subdivisions)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    /// wp = dF for F = y1 y2.
    fn exact_field() -> FluxField {
        FluxField::new(2, |y: &[f64]| vec![y[1], y[0]]).with_exact_hint()
    }

    /// wp = (0, y1): curl 1, the standard non-exact example.
    fn shear_field() -> FluxField {
        FluxField::new(2, |y: &[f64]| vec![0.0, y[0]])
    }

    fn unit_square(segments: usize) -> BasePath {
        BasePath::polyline(
            &[
                vec![0.0, 0.0],
                vec![1.0, 0.0],
                vec![1.0, 1.0],
                vec![0.0, 1.0],
                vec![0.0, 0.0],
            ],
            segments,
        )
        .unwrap()
    }

    #[test]
    fn exact_form_obeys_fundamental_theorem() {
        let wp = exact_field();
        // polyline from A to B via two corners
        let path = BasePath::polyline(
            &[
                vec![0.2, -0.4],
                vec![1.0, 0.3],
                vec![-0.5, 0.8],
                vec![0.7, 1.1],
            ],
            334,
        )
        .unwrap();
        let result = transport(&wp, &path).unwrap();
        let expected = 0.7 * 1.1 - 0.2 * (-0.4);
        assert!((result.delta_p - expected).abs() <= 1e-6);
        // delta equals the increment sum by construction
        let sum: f64 = result.increments.iter().sum();
        assert!((result.delta_p - sum).abs() <= 1e-12);
    }

    #[test]
    fn zero_field_transports_nothing() {
        let wp = FluxField::new(2, |_: &[f64]| vec![0.0, 0.0]);
        let path = unit_square(10);
        assert_eq!(transport(&wp, &path).unwrap().delta_p, 0.0);
    }

    #[test]
    fn diagonal_segment_quadrature() {
        // wp = (0, y1) along the straight segment (0,0) -> (1,1):
        // integral of s ds = 1/2.
        let wp = shear_field();
        let path = BasePath::polyline(&[vec![0.0, 0.0], vec![1.0, 1.0]], 1000).unwrap();
        let result = transport(&wp, &path).unwrap();
        assert!((result.delta_p - 0.5).abs() <= 1e-6);
    }

    #[test]
    fn unit_square_holonomy_is_enclosed_area() {
        let wp = shear_field();
        assert!((loop_holonomy(&wp, &unit_square(50)).unwrap() - 1.0).abs() <= 1e-6);

        let exact = exact_field();
        assert!(loop_holonomy(&exact, &unit_square(50)).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn quadratic_field_loop_matches_double_integral() {
        // wp = (0, y1^2) around the unit square; the enclosed curl integral
        // of 2 y1 over [0,1]^2 is 1.
        let wp = FluxField::new(2, |y: &[f64]| vec![0.0, y[0] * y[0]]);
        let value = loop_holonomy(&wp, &unit_square(100)).unwrap();
        assert!((value - 1.0).abs() <= 1e-5);
        // numeric double-integral oracle over the same square
        let square = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 1.0],
            vec![0.0, 0.0],
        ];
        let surface = surface_curl_integral(&wp, &square, 1e-5, 3).unwrap();
        assert!((value - surface).abs() <= 1e-5);
    }

    #[test]
    fn loop_holonomy_rejects_open_paths() {
        let wp = shear_field();
        let open = BasePath::polyline(&[vec![0.0, 0.0], vec![1.0, 0.0]], 3).unwrap();
        assert!(loop_holonomy(&wp, &open).is_err());
    }

    #[test]
    fn path_dependence_difference_equals_loop() {
        let wp = shear_field();
        let report = path_dependence_experiment(
            &wp,
            &[0.0, 0.0],
            &[1.0, 0.0],
            &[0.0, 1.0],
            &[1.0, 1.0],
            100,
        )
        .unwrap();
        assert!((report.difference.abs() - 1.0).abs() <= 1e-6);
        assert!(report.consistency_gap <= 1e-10);

        // exact field: no path dependence
        let exact = exact_field();
        let report = path_dependence_experiment(
            &exact,
            &[0.0, 0.0],
            &[1.0, 0.0],
            &[0.0, 1.0],
            &[1.0, 1.0],
            100,
        )
        .unwrap();
        assert!(report.difference.abs() <= 1e-6);
        assert!(report.consistency_gap <= 1e-10);

        // constant covector fields are exact too
        let constant = FluxField::new(2, |_: &[f64]| vec![0.4, -0.3]);
        let report = path_dependence_experiment(
            &constant,
            &[0.0, 0.0],
            &[1.0, 0.0],
            &[0.0, 1.0],
            &[1.0, 1.0],
            20,
        )
        .unwrap();
        assert!(report.difference.abs() <= 1e-12);
    }

    #[test]
    fn transport_is_additive_and_antisymmetric() {
        let wp = FluxField::new(2, |y: &[f64]| vec![y[0] * y[1], y[0] - y[1] * y[1]]);
        let mut rng = Stream::new(12, 0);
        for _ in 0..10 {
            let corners: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.normal(), rng.normal()]).collect();
            let first = BasePath::polyline(&corners[..3], 7).unwrap();
            let second = BasePath::polyline(&corners[2..], 7).unwrap();
            let joined = first.concat(&second).unwrap();
            let a = transport(&wp, &first).unwrap().delta_p;
            let b = transport(&wp, &second).unwrap().delta_p;
            let ab = transport(&wp, &joined).unwrap().delta_p;
            assert!((ab - (a + b)).abs() <= 1e-12);

            let back = transport(&wp, &joined.reversed()).unwrap().delta_p;
            assert!((ab + back).abs() <= 1e-12);
        }
    }

    #[test]
    fn stokes_consistency_on_convex_polygon() {
        // polynomial field on a convex pentagon
        let wp = FluxField::new(2, |y: &[f64]| {
            vec![y[0] * y[0] - y[1], y[0] * y[1] + 0.5 * y[1] * y[1]]
        });
        let mut pentagon: Vec<Vec<f64>> = (0..5)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / 5.0;
                vec![angle.cos(), angle.sin()]
            })
            .collect();
        pentagon.push(pentagon[0].clone());
        let looped = BasePath::polyline(&pentagon, 400).unwrap();
        let circulation = loop_holonomy(&wp, &looped).unwrap();
        let surface = surface_curl_integral(&wp, &pentagon, 1e-5, 4).unwrap();
        assert!(
            (circulation - surface).abs() <= 1e-5,
            "circulation {circulation} vs surface {surface}"
        );
    }

    #[test]
    fn quadrature_refines_at_second_order() {
        let wp = FluxField::new(2, |y: &[f64]| vec![(y[1] * 2.0).sin(), (y[0] * 3.0).cos()]);
        let corners = vec![vec![0.0, 0.0], vec![1.0, 0.7]];
        let reference = transport(&wp, &BasePath::polyline(&corners, 4096).unwrap())
            .unwrap()
            .delta_p;
        let coarse = (transport(&wp, &BasePath::polyline(&corners, 32).unwrap())
            .unwrap()
            .delta_p
            - reference)
            .abs();
        let fine = (transport(&wp, &BasePath::polyline(&corners, 64).unwrap())
            .unwrap()
            .delta_p
            - reference)
            .abs();
        assert!(coarse / fine > 3.0, "refinement ratio {}", coarse / fine);
    }

    #[test]
    fn horizontal_residual_detects_defects() {
        let wp = shear_field();
        let path = BasePath::polyline(&[vec![0.0, 0.0], vec![1.0, 1.0]], 50).unwrap();
        let result = transport(&wp, &path).unwrap();
        // P series generated by transport itself: self-consistent lift
        let mut series = vec![0.0];
        for inc in &result.increments {
            series.push(series.last().unwrap() + inc);
        }
        assert!(horizontal_residual(&wp, &path, &series).unwrap() <= 1e-12);

        // a defect at one node is seen at full size
        let mut broken = series.clone();
        broken[25] += 0.1;
        assert!(horizontal_residual(&wp, &path, &broken).unwrap() >= 0.099);

        // length mismatch is a contract violation
        assert!(horizontal_residual(&wp, &path, &series[1..]).is_err());
    }

    #[test]
    fn horizontal_residual_accepts_characteristic_lift() {
        // For a gradient field the true lift is P(y) itself sampled along
        // the path; midpoint transport reproduces it to second order.
        let wp = FluxField::new(2, |y: &[f64]| {
            let profile = (-(y[0] * y[0] + y[1] * y[1])).exp();
            vec![-2.0 * y[0] * profile, -2.0 * y[1] * profile]
        });
        let path = BasePath::polyline(&[vec![-1.0, -0.5], vec![0.8, 0.9]], 200).unwrap();
        let series: Vec<f64> = path
            .nodes()
            .iter()
            .map(|y| (-(y[0] * y[0] + y[1] * y[1])).exp())
            .collect();
        assert!(horizontal_residual(&wp, &path, &series).unwrap() <= 1e-4);
    }

    #[test]
    fn midpoint_failures_name_the_segment() {
        let wp = FluxField::new(1, |y: &[f64]| vec![if y[0] > 0.5 { f64::NAN } else { 1.0 }]);
        let path = BasePath::polyline(&[vec![0.0], vec![1.0]], 4).unwrap();
        match transport(&wp, &path) {
            Err(crate::error::Error::Segment { segment, .. }) => assert_eq!(segment, 2),
            other => panic!("expected segment error, got {other:?}"),
        }
    }

    #[test]
    fn path_csv_layout() {
        let wp = shear_field();
        let path = BasePath::polyline(&[vec![0.0, 0.0], vec![1.0, 1.0]], 2).unwrap();
        let result = transport(&wp, &path).unwrap();
        let mut buf = Vec::new();
        result.write_csv(&path, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "s,y1,y2,dP_cum");
        assert_eq!(text.lines().count(), 4);
        let last = text.lines().last().unwrap();
        let dp: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
        assert!((dp - result.delta_p).abs() <= 1e-15);
    }
}
