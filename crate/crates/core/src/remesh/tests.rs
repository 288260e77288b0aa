use nalgebra::{Matrix2, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::normal_io::{add_noise, synthesize, Descriptor};

fn flat(w: usize, h: usize) -> (ScreenMesh, NormalMap) {
    let nm = NormalMap::constant(w, h, Vector3::z()).unwrap();
    let mut m = ScreenMesh::from_mask(&nm).unwrap();
    m.rasterize(&nm, &Camera::Orthographic).unwrap();
    (m, nm)
}

fn sphere(size: usize) -> (ScreenMesh, NormalMap) {
    let c = size as f64 / 2.0;
    let desc = Descriptor::SphereCap {
        center: [c, c],
        radius: c / 0.9,
        cap_angle_deg: 60.0,
    };
    let (nm, _) = synthesize(&desc, size, size, &Camera::Orthographic).unwrap();
    let mut m = ScreenMesh::from_mask(&nm).unwrap();
    m.rasterize(&nm, &Camera::Orthographic).unwrap();
    (m, nm)
}

fn zero_sq() -> ScreenQuadric {
    ScreenQuadric {
        a: Matrix2::zeros(),
        b: Vector2::zeros(),
        c: 0.0,
    }
}

#[test]
fn zero_quadrics_cost_nothing_at_midpoint() {
    let (c, t) = edge_cost(&zero_sq(), &zero_sq(), &Vector2::new(1.0, 0.0));
    assert_eq!((c, t), (0.0, 0.5));
}

#[test]
fn flat_region_costs_nothing_without_regularization() {
    let (m, nm) = flat(6, 6);
    let cam = Camera::Orthographic;
    let vq = VertexQuadrics::build(&m, &nm, &cam, 0.0);
    for e in m.edges() {
        if let Some(c) = collapse_cost(&m, &vq, e, 0) {
            assert!(c.cost.abs() < 1e-12, "cost {}", c.cost);
        }
    }
}

fn random_sq(rng: &mut ChaCha8Rng) -> ScreenQuadric {
    let l = Matrix2::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let b = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let a = l * l.transpose();
    // keep Q̃ >= 0: c >= bᵀ A⁺ b
    let c = b.dot(&((a + Matrix2::identity() * 1e-3).try_inverse().unwrap() * b)) + rng.random_range(0.0..1.0);
    ScreenQuadric { a, b, c }
}

#[test]
fn edge_cost_matches_dense_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let (qv, qw) = (random_sq(&mut rng), random_sq(&mut rng));
        let e = Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (cost, t) = edge_cost(&qv, &qw, &e);
        assert!((0.0..=1.0).contains(&t));
        let f = |t: f64| qv.eval(&(e * t)) + qw.eval(&(e * (t - 1.0)));
        let scan = (0..=10_000)
            .map(|i| f(i as f64 / 10_000.0))
            .fold(f64::INFINITY, f64::min);
        assert!(cost <= scan + 1e-9, "{cost} > {scan}");
        assert!(scan - cost <= 1e-6, "{cost} vs {scan}");
    }
}

#[test]
fn tau_zero_collapses_nothing_on_noisy_input() {
    let (_, nm) = sphere(24);
    let nm = add_noise(&nm, 3.0, 5);
    let mut m = ScreenMesh::from_mask(&nm).unwrap();
    let cam = Camera::Orthographic;
    m.rasterize(&nm, &cam).unwrap();
    assert_eq!(decimate_pass(&mut m, &nm, &cam, 1e-5, PassStop::Threshold(0.0)), 0);
}

#[test]
fn target_equal_to_count_collapses_nothing() {
    let (mut m, nm) = flat(5, 5);
    let n = m.vertex_count();
    let before = m.clone();
    assert_eq!(
        decimate_pass(&mut m, &nm, &Camera::Orthographic, 1e-5, PassStop::Target(n)),
        0
    );
    assert_eq!(m, before);
}

#[test]
fn flat_grid_decimates_to_outline() {
    let (mut m, nm) = flat(16, 16);
    let cam = Camera::Orthographic;
    let tau = 1e6;
    let collapses = decimate_pass(&mut m, &nm, &cam, 1e-5, PassStop::Threshold(tau));
    assert!(collapses > 0);
    m.audit().unwrap();
    m.rebin_dirty(&nm, &cam).unwrap();
    assert_eq!(m.uncovered_pixels(&nm), 0);
    let interior = m.vertices().filter(|&v| !m.is_boundary_vertex(v)).count();
    assert!(interior <= 2, "{interior} interior vertices left");
    // everything left is either forbidden or above the threshold
    m.rasterize(&nm, &cam).unwrap();
    let vq = VertexQuadrics::build(&m, &nm, &cam, 1e-5);
    for e in m.edges() {
        if let Some(c) = collapse_cost(&m, &vq, e, 0) {
            let (h, p) = collapse_plan(&m, &c);
            assert!(c.cost > tau || m.check_collapse(h, p).is_err());
        }
    }
}

#[test]
fn threshold_pass_respects_tau() {
    let (mut m, nm) = sphere(32);
    let cam = Camera::Orthographic;
    let tau = 4.0;
    let vq = VertexQuadrics::build(&m, &nm, &cam, 1e-5);
    let cheap = m
        .edges()
        .filter_map(|e| collapse_cost(&m, &vq, e, 0))
        .filter(|c| c.cost <= tau)
        .count();
    let done = decimate_pass(&mut m, &nm, &cam, 1e-5, PassStop::Threshold(tau));
    assert!(done > 0 && cheap > 0);
    m.audit().unwrap();
}

fn hexagon_scene() -> (ScreenMesh, NormalMap) {
    let c = Vector2::new(5.0, 5.0);
    let mut pos = vec![c];
    for k in 0..6 {
        let t = std::f64::consts::PI / 3.0 * k as f64;
        pos.push(c + Vector2::new(t.cos(), t.sin()) * 3.0);
    }
    let tris: Vec<[u32; 3]> = (0..6).map(|k| [0, 1 + k, 1 + (k + 1) % 6]).collect();
    let nm = NormalMap::constant(10, 10, Vector3::z()).unwrap();
    let mut m = ScreenMesh::from_triangles(10, 10, pos, &tris).unwrap();
    m.rasterize(&nm, &Camera::Orthographic).unwrap();
    (m, nm)
}

#[test]
fn symmetric_star_does_not_move() {
    let (m, nm) = hexagon_scene();
    let moves = vertex_displacements(&m, &nm, &Camera::Orthographic, 1e-3);
    assert_eq!(moves.len(), 1);
    assert!(moves[0].2.norm() < 1e-9, "{}", moves[0].2);
}

#[test]
fn flat_vertex_moves_toward_star_centroid() {
    let (mut m, nm) = hexagon_scene();
    let cam = Camera::Orthographic;
    m.move_vertex(Vertex(0), Vector2::new(0.8, 0.3)).unwrap();
    m.rebin_dirty(&nm, &cam).unwrap();
    let before = (m.position(Vertex(0)) - Vector2::new(5.0, 5.0)).norm();
    align_vertices(&mut m, &nm, &cam, 1e-3, 0.5).unwrap();
    let after = (m.position(Vertex(0)) - Vector2::new(5.0, 5.0)).norm();
    assert!(after < before);
}

#[test]
fn alignment_never_increases_vertex_energy() {
    let (_, nm) = sphere(28);
    let nm = add_noise(&nm, 5.0, 2);
    let cam = Camera::Orthographic;
    let mut m = ScreenMesh::from_mask(&nm).unwrap();
    m.rasterize(&nm, &cam).unwrap();
    decimate_pass(&mut m, &nm, &cam, 1e-5, PassStop::Target(200));
    m.rebin_dirty(&nm, &cam).unwrap();
    let snapshot = vertex_displacements(&m, &nm, &cam, 1e-5);
    let origin: Vec<Vector2<f64>> = snapshot.iter().map(|(v, _, _)| m.position(*v)).collect();
    align_vertices(&mut m, &nm, &cam, 1e-5, 0.5).unwrap();
    for ((v, sq, _), o) in snapshot.iter().zip(origin) {
        let applied = m.position(*v) - o;
        assert!(sq.eval(&applied) <= sq.eval(&Vector2::zeros()) * (1.0 + 1e-12) + 1e-12);
    }
    m.audit().unwrap();
}

#[test]
fn bad_diagonal_flips_once() {
    let pos = vec![
        Vector2::new(0.0, 1.0),
        Vector2::new(2.0, 0.0),
        Vector2::new(4.0, 1.0),
        Vector2::new(2.0, 2.0),
    ];
    let nm = NormalMap::constant(4, 2, Vector3::z()).unwrap();
    let cam = Camera::Orthographic;
    let mut m = ScreenMesh::from_triangles(4, 2, pos, &[[0, 1, 2], [0, 2, 3]]).unwrap();
    m.rasterize(&nm, &cam).unwrap();
    assert_eq!(align_edges(&mut m, &nm, &cam, 1e-3).unwrap(), 1);
    assert_eq!(align_edges(&mut m, &nm, &cam, 1e-3).unwrap(), 0);
    let e = m.edges().find(|&e| !m.is_boundary_edge(e)).unwrap();
    let [a, _, c, _] = m.edge_quad(e).unwrap();
    assert_eq!((m.position(a) - m.position(c)).norm(), 2.0);
}

#[test]
fn cocircular_quad_keeps_its_diagonal() {
    let (mut m, nm) = flat(1, 1);
    assert_eq!(align_edges(&mut m, &nm, &Camera::Orthographic, 1e-3).unwrap(), 0);
    let p = [
        Vector2::new(0.0, 0.0),
        Vector2::new(1.0, 0.0),
        Vector2::new(1.0, 1.0),
        Vector2::new(0.0, 1.0),
    ];
    let lift = p.map(|q| q.norm_squared());
    assert_eq!(metric_incircle(&p, &lift), 0.0);
}

/// Classical incircle test in screen coordinates: `d` strictly inside the
/// circumcircle of the positively oriented triangle `(a, b, c)`.
fn classical_incircle(a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>, d: Vector2<f64>) -> f64 {
    let r = |p: Vector2<f64>| (p.x - d.x, p.y - d.y, (p - d).norm_squared());
    let (ax, ay, al) = r(a);
    let (bx, by, bl) = r(b);
    let (cx, cy, cl) = r(c);
    ax * (by * cl - bl * cy) - ay * (bx * cl - bl * cx) + al * (bx * cy - by * cx)
}

pub(crate) fn random_flat_mesh(seed: u64, vertices: usize) -> (ScreenMesh, NormalMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut m, nm) = flat(8, 8);
    let cam = Camera::Orthographic;
    let mut guard = 0;
    while m.vertex_count() > vertices && guard < 10_000 {
        guard += 1;
        let es: Vec<Edge> = m.edges().collect();
        let e = es[rng.random_range(0..es.len())];
        let h = e.halfedge(rng.random_range(0..2));
        let (a, b) = (m.position(m.from_vertex(h)), m.position(m.to_vertex(h)));
        let p = if m.is_boundary_vertex(m.to_vertex(h)) {
            b
        } else {
            a + (b - a) * rng.random_range(0.0..1.0)
        };
        let _ = m.collapse(h, p);
    }
    for _ in 0..40 {
        let vs: Vec<Vertex> = m.vertices().collect();
        let v = vs[rng.random_range(0..vs.len())];
        if !m.is_boundary_vertex(v) {
            let d = Vector2::new(rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7));
            let _ = m.move_vertex(v, d);
        }
    }
    m.rasterize(&nm, &cam).unwrap();
    (m, nm)
}

/// Interior edges whose opposite vertex lies strictly inside the
/// circumcircle (relative tolerance exempts cocircular configurations).
pub(crate) fn delaunay_violations(m: &ScreenMesh) -> usize {
    m.edges()
        .filter(|&e| {
            let Some([a, b, c, d]) = m.edge_quad(e) else {
                return false;
            };
            let [pa, pb, pc, pd] = [a, b, c, d].map(|v| m.position(v));
            let scale = [pa, pb, pc].iter().map(|p| (p - pd).norm_squared()).fold(0.0, f64::max);
            classical_incircle(pa, pc, pb, pd) > 1e-9 * scale * scale
        })
        .count()
}

#[test]
fn flat_alignment_is_delaunay() {
    for seed in 0..10 {
        let (mut m, nm) = random_flat_mesh(seed, 50);
        align_edges(&mut m, &nm, &Camera::Orthographic, 1e-5).unwrap();
        m.audit().unwrap();
        assert_eq!(delaunay_violations(&m), 0, "seed {seed}");
    }
}

#[test]
fn target_schedule() {
    assert_eq!(iteration_target(100, 5, 5), 100);
    assert_eq!(iteration_target(100, 1, 5), (100.0 * 10f64.powf(0.8)).round() as usize);
    for k in 1..5 {
        assert!(iteration_target(1000, k, 5) > iteration_target(1000, k + 1, 5));
    }
}

#[test]
fn config_validation() {
    assert!(RemeshConfig::new(StopMode::Threshold(0.0)).validate().is_err());
    assert!(RemeshConfig::new(StopMode::VertexTarget(2)).validate().is_err());
    let mut c = RemeshConfig::new(StopMode::VertexTarget(10));
    c.alpha = 1.5;
    assert!(c.validate().is_err());
    assert!(RemeshConfig::new(StopMode::Threshold(2.0)).validate().is_ok());
}

#[test]
fn generous_target_keeps_topology_size() {
    let (mut m, nm) = sphere(20);
    let n = m.vertex_count();
    let cfg = RemeshConfig::new(StopMode::VertexTarget(n));
    let stats = run(&mut m, &nm, &Camera::Orthographic, &cfg).unwrap();
    assert!(stats.iter().all(|s| s.collapses == 0));
    assert_eq!(m.vertex_count(), n);
    m.audit().unwrap();
}

#[test]
fn vertex_target_is_met() {
    let (mut m, nm) = sphere(48);
    let target = 150;
    let cfg = RemeshConfig::new(StopMode::VertexTarget(target));
    run(&mut m, &nm, &Camera::Orthographic, &cfg).unwrap();
    m.audit().unwrap();
    let n = m.vertex_count();
    let slack = (1.02 * target as f64) as usize + locked_vertices(&m);
    assert!(n >= target && n <= slack, "{n} not in [{target}, {slack}]");
    assert_eq!(m.uncovered_pixels(&nm), 0);
}

#[test]
fn threshold_sweep_is_monotone() {
    let mut counts = Vec::new();
    for tau in [2.0, 64.0, 2048.0] {
        let (mut m, nm) = sphere(40);
        run(
            &mut m,
            &nm,
            &Camera::Orthographic,
            &RemeshConfig::new(StopMode::Threshold(tau)),
        )
        .unwrap();
        counts.push(m.vertex_count());
    }
    assert!(counts[0] >= counts[1] && counts[1] >= counts[2], "{counts:?}");
}

#[test]
fn runs_are_deterministic() {
    let go = || {
        let (_, nm) = sphere(32);
        let nm = add_noise(&nm, 2.0, 9);
        let mut m = ScreenMesh::from_mask(&nm).unwrap();
        run(
            &mut m,
            &nm,
            &Camera::Orthographic,
            &RemeshConfig::new(StopMode::VertexTarget(80)),
        )
        .unwrap();
        m
    };
    assert_eq!(go(), go());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn remeshing_preserves_invariants(seed in 0u64..10_000, target in 20usize..120, persp in any::<bool>()) {
        let cam = if persp { Camera::perspective(80.0, 80.0, 12.0, 12.0).unwrap() } else { Camera::Orthographic };
        let desc = Descriptor::Sinusoid { amp: 2.0, freq: 0.35 };
        let (nm, _) = synthesize(&desc, 24, 24, &cam).unwrap();
        let nm = add_noise(&nm, 2.0, seed);
        let mut m = ScreenMesh::from_mask(&nm).unwrap();
        m.rasterize(&nm, &cam).unwrap();
        let area: f64 = m.faces().map(|f| m.face_area(f)).sum();
        run(&mut m, &nm, &cam, &RemeshConfig::new(StopMode::VertexTarget(target))).unwrap();
        prop_assert!(m.audit().is_ok());
        let after: f64 = m.faces().map(|f| m.face_area(f)).sum();
        prop_assert!((after - area).abs() <= 1e-6 * area);
        prop_assert_eq!(m.uncovered_pixels(&nm), 0);
    }
}
