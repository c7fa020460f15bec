use bellwire::affine::AffineOperator;
use bellwire::audit::{random_context_draw, random_transformer, FAMILIES};
use bellwire::bellman::{solve_affine_linear, solve_linear, Transformer};
use bellwire::circuit::{congruence_bound, duplicate, projection, CircuitExpr, TraceConstants};
use bellwire::linalg::{sup_dist, Matrix};
use bellwire::random::{random_values, rng, AuditRng};
use bellwire::space::FiniteSpace;
use bellwire::trace::{banach_trace, GuardedTrace};
use proptest::prelude::*;

fn space(name: &str, n: usize) -> FiniteSpace {
    FiniteSpace::indexed(name, &name.to_lowercase(), n).unwrap()
}

/// Random matrix whose rows have absolute sum exactly `norm`.
fn matrix(r: &mut AuditRng, rows: usize, cols: usize, norm: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let row = random_values(r, cols, 1.0);
        let s: f64 = row.iter().map(|x| x.abs()).sum();
        for (j, x) in row.iter().enumerate() {
            m.set(i, j, if s > 0.0 { norm * x / s } else { 0.0 });
        }
    }
    m
}

/// Affine map `(x, z) |-> (y, z')` given as one matrix over the stacked vector.
struct AffineMap {
    b: Vec<f64>,
    m: Matrix,
    ny: usize,
}

impl AffineMap {
    /// Random map with `||dz'/dz|| = alpha`; other blocks have norm at most 1.
    fn random(r: &mut AuditRng, nx: usize, ny: usize, nz: usize, alpha: f64) -> Self {
        let top = matrix(r, ny, nx + nz, 1.0);
        let zx = matrix(r, nz, nx, 1.0);
        let zz = matrix(r, nz, nz, alpha);
        let mut m = Matrix::zeros(ny + nz, nx + nz);
        for i in 0..ny {
            m.row_mut(i).copy_from_slice(top.row(i));
        }
        for i in 0..nz {
            m.row_mut(ny + i)[..nx].copy_from_slice(zx.row(i));
            m.row_mut(ny + i)[nx..].copy_from_slice(zz.row(i));
        }
        Self {
            b: random_values(r, ny + nz, 1.0),
            m,
            ny,
        }
    }

    fn full(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        let mut arg = x.to_vec();
        arg.extend_from_slice(z);
        self.m.mat_vec(&arg).iter().zip(&self.b).map(|(a, b)| a + b).collect()
    }

    fn out(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        self.full(x, z)[..self.ny].to_vec()
    }

    fn fb(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        self.full(x, z)[self.ny..].to_vec()
    }
}

const TOL: f64 = 1e-13;

fn trace_of(f: &AffineMap, nx: usize, nz: usize, alpha: f64, x: &[f64]) -> Vec<f64> {
    let t = GuardedTrace::new(|a: &[f64], z: &[f64]| f.out(a, z), |a: &[f64], z: &[f64]| f.fb(a, z), nx, nz, alpha, TOL).unwrap();
    t.eval(x).unwrap().output
}

#[test]
fn bellman_recursion_is_a_trace() {
    let mut r = rng(1);
    for _ in 0..30 {
        let s = space("S", 6);
        let t = random_transformer(&mut r, &s, &s, 0.9).unwrap();
        let bellman = |_: &[f64], z: &[f64]| t.apply_raw(z);
        let tr = banach_trace(bellman, bellman, 0, 6, 0.9, 1e-12, t.ball_out()).unwrap();
        let got = tr.eval(&[]).unwrap();
        let exact = solve_linear(&t).unwrap();
        assert!(sup_dist(&got.output, exact.values()) <= 1e-8);
        assert!(sup_dist(&got.feedback, exact.values()) <= 1e-8);
    }
}

#[test]
fn yanking_returns_the_identity() {
    let z = space("Z", 3);
    let n = 3;
    let mut swap = Matrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        swap.set(i, n + i, 1.0);
        swap.set(n + i, i, 1.0);
    }
    let body = AffineOperator::linear(&FiniteSpace::sum(&z, &z), &FiniteSpace::sum(&z, &z), swap, 5.0).unwrap();
    let traced = CircuitExpr::trace(CircuitExpr::leaf(body), 5.0).compile().unwrap();
    assert!(traced.lin().max_abs_diff(&Matrix::identity(n)) <= 1e-15);
    assert!(traced.offset().iter().all(|&b| b == 0.0));

    let t = GuardedTrace::new(|_: &[f64], z: &[f64]| z.to_vec(), |x: &[f64], _: &[f64]| x.to_vec(), n, n, 0.0, TOL).unwrap();
    let x = [0.3, -1.2, 2.0];
    assert_eq!(t.eval(&x).unwrap().output, x.to_vec());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trace_over_nothing_is_the_map(seed in any::<u64>(), nx in 1usize..4, ny in 1usize..4) {
        let mut r = rng(seed);
        let f = AffineMap::random(&mut r, nx, ny, 0, 0.0);
        let x = random_values(&mut r, nx, 2.0);
        prop_assert!(sup_dist(&trace_of(&f, nx, 0, 0.0, &x), &f.out(&x, &[])) <= 1e-15);
    }

    #[test]
    fn nested_traces_equal_the_joint_trace(seed in any::<u64>(), nx in 1usize..3, ny in 1usize..3, n1 in 1usize..3, n2 in 1usize..3) {
        let mut r = rng(seed);
        let alpha = 0.6;
        let f = AffineMap::random(&mut r, nx, ny, n1 + n2, alpha);
        let x = random_values(&mut r, nx, 2.0);
        let joint = trace_of(&f, nx, n1 + n2, alpha, &x);
        // Inner trace over z2 with (x, z1) as input and (y, z1') as output.
        let inner_out = |xz1: &[f64], z2: &[f64]| {
            let mut z = xz1[nx..].to_vec();
            z.extend_from_slice(z2);
            f.full(&xz1[..nx], &z)[..ny + n1].to_vec()
        };
        let inner_fb = |xz1: &[f64], z2: &[f64]| {
            let mut z = xz1[nx..].to_vec();
            z.extend_from_slice(z2);
            f.full(&xz1[..nx], &z)[ny + n1..].to_vec()
        };
        let inner = GuardedTrace::new(inner_out, inner_fb, nx + n1, n2, alpha, TOL).unwrap();
        let g = |x: &[f64], z1: &[f64]| {
            let mut arg = x.to_vec();
            arg.extend_from_slice(z1);
            inner.eval(&arg).unwrap().output
        };
        // The reduced feedback on z1 contracts with modulus alpha as well.
        let outer = GuardedTrace::new(|a: &[f64], z: &[f64]| g(a, z)[..ny].to_vec(), |a: &[f64], z: &[f64]| g(a, z)[ny..].to_vec(), nx, n1, alpha, TOL).unwrap();
        let nested = outer.eval(&x).unwrap().output;
        prop_assert!(sup_dist(&joint, &nested) <= 1e-10, "{joint:?} vs {nested:?}");
    }

    #[test]
    fn trace_is_natural_in_input_and_output(seed in any::<u64>(), nx in 1usize..4, ny in 1usize..4, nz in 1usize..4) {
        let mut r = rng(seed);
        let alpha = 0.7;
        let f = AffineMap::random(&mut r, nx, ny, nz, alpha);
        let g_m = matrix(&mut r, nx, 2, 1.0);
        let g_b = random_values(&mut r, nx, 1.0);
        let g = |u: &[f64]| -> Vec<f64> { g_m.mat_vec(u).iter().zip(&g_b).map(|(a, b)| a + b).collect() };
        let h_m = matrix(&mut r, 2, ny, 1.5);
        let h = |y: &[f64]| h_m.mat_vec(y);
        let u = random_values(&mut r, 2, 2.0);

        let pre = GuardedTrace::new(|a: &[f64], z: &[f64]| f.out(&g(a), z), |a: &[f64], z: &[f64]| f.fb(&g(a), z), 2, nz, alpha, TOL).unwrap();
        let lhs = pre.eval(&u).unwrap().output;
        let rhs = trace_of(&f, nx, nz, alpha, &g(&u));
        prop_assert!(sup_dist(&lhs, &rhs) <= 1e-10);

        let post = GuardedTrace::new(|a: &[f64], z: &[f64]| h(&f.out(a, z)), |a: &[f64], z: &[f64]| f.fb(a, z), nx, nz, alpha, TOL).unwrap();
        let x = g(&u);
        prop_assert!(sup_dist(&post.eval(&x).unwrap().output, &h(&trace_of(&f, nx, nz, alpha, &x))) <= 1e-10);
    }

    #[test]
    fn feedback_fixed_point_is_unique(seed in any::<u64>(), nz in 1usize..5) {
        let mut r = rng(seed);
        let f = AffineMap::random(&mut r, 2, 2, nz, 0.8);
        let t = GuardedTrace::new(|a: &[f64], z: &[f64]| f.out(a, z), |a: &[f64], z: &[f64]| f.fb(a, z), 2, nz, 0.8, TOL).unwrap();
        let x = random_values(&mut r, 2, 1.0);
        let a = t.eval_from(&x, &random_values(&mut r, nz, 50.0)).unwrap();
        let b = t.eval_from(&x, &random_values(&mut r, nz, 50.0)).unwrap();
        prop_assert!(sup_dist(&a.feedback, &b.feedback) <= 1e-10);
        prop_assert!(sup_dist(&a.output, &b.output) <= 1e-10);
    }

    #[test]
    fn series_compiles_to_composition(seed in any::<u64>(), gamma in 0.1f64..0.99) {
        let mut r = rng(seed);
        let (x, y) = (space("X", 3), space("Y", 4));
        let t1 = random_transformer(&mut r, &x, &y, gamma).unwrap();
        let t2 = random_transformer(&mut r, &y, &x, gamma).unwrap();
        let c = CircuitExpr::series(CircuitExpr::transformer(&t1), CircuitExpr::transformer(&t2)).compile().unwrap();
        prop_assert!(c.lipschitz() <= gamma * gamma + 1e-12);
        for _ in 0..10 {
            let v = random_values(&mut r, 3, 10.0);
            let w = random_values(&mut r, 3, 10.0);
            prop_assert!(sup_dist(&c.apply_raw(&v), &t1.apply_raw(&t2.apply_raw(&v))) <= 1e-12);
            prop_assert!(sup_dist(&c.apply_raw(&v), &c.apply_raw(&w)) <= gamma * gamma * sup_dist(&v, &w) + 1e-12);
        }
    }

    #[test]
    fn parallel_keeps_separable_values_separable(seed in any::<u64>(), gamma in 0.3f64..0.95) {
        let mut r = rng(seed);
        let (x, y) = (space("X", 3), space("Y", 2));
        let t1 = random_transformer(&mut r, &x, &x, gamma).unwrap();
        let t2 = random_transformer(&mut r, &y, &y, gamma).unwrap();
        let c = CircuitExpr::parallel(CircuitExpr::transformer(&t1), CircuitExpr::transformer(&t2)).compile().unwrap();
        let v1 = random_values(&mut r, 3, 5.0);
        let v2 = random_values(&mut r, 2, 5.0);
        let sep: Vec<f64> = v1.iter().flat_map(|a| v2.iter().map(move |b| a + b)).collect();
        let (u1, u2) = (t1.apply_raw(&v1), t2.apply_raw(&v2));
        let want: Vec<f64> = u1.iter().flat_map(|a| u2.iter().map(move |b| a + b)).collect();
        prop_assert!(sup_dist(&c.apply_raw(&sep), &want) <= 1e-12);

        let v = solve_affine_linear(&c).unwrap();
        let (w1, w2) = (solve_linear(&t1).unwrap(), solve_linear(&t2).unwrap());
        for i in 0..3 {
            for j in 0..2 {
                prop_assert!((v.get(i * 2 + j) - w1.get(i) - w2.get(j)).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn traced_operator_respects_external_modulus(seed in any::<u64>(), nx in 1usize..4, ny in 1usize..4, nz in 1usize..4) {
        let mut r = rng(seed);
        let (xs, ys, zs) = (space("X", nx), space("Y", ny), space("Z", nz));
        let f = AffineMap::random(&mut r, nx, ny, nz, 0.75);
        let body = AffineOperator::new(&FiniteSpace::sum(&ys, &zs), &FiniteSpace::sum(&xs, &zs), f.b.clone(), f.m.clone(), 100.0, 100.0).unwrap();
        let k = TraceConstants::of_body(&body).unwrap();
        let traced = CircuitExpr::trace(CircuitExpr::leaf(body), 100.0).compile().unwrap();
        prop_assert!(traced.lipschitz() <= k.external_modulus() + 1e-12);
        let a = random_values(&mut r, nx, 3.0);
        let b = random_values(&mut r, nx, 3.0);
        prop_assert!(sup_dist(&traced.apply_raw(&a), &traced.apply_raw(&b)) <= k.external_modulus() * sup_dist(&a, &b) + 1e-12);
        prop_assert!(sup_dist(&traced.apply_raw(&a), &trace_of(&f, nx, nz, 0.75, &a)) <= 1e-9);
    }

    #[test]
    fn operator_distance_is_attained_at_a_vertex(seed in any::<u64>(), n in 1usize..6, m in 1usize..4, radius in 0.1f64..20.0) {
        let mut r = rng(seed);
        let (xs, ys) = (space("X", m), space("Y", n));
        let a = AffineOperator::new(&xs, &ys, random_values(&mut r, m, 1.0), matrix(&mut r, m, n, 0.9), 1.0, 1.0).unwrap();
        let b = AffineOperator::new(&xs, &ys, random_values(&mut r, m, 1.0), matrix(&mut r, m, n, 0.5), 1.0, 1.0).unwrap();
        let mut best = 0.0_f64;
        for mask in 0u32..(1 << n) {
            let v: Vec<f64> = (0..n).map(|j| if mask & (1 << j) != 0 { radius } else { -radius }).collect();
            best = best.max(sup_dist(&a.apply_raw(&v), &b.apply_raw(&v)));
        }
        let d = a.distance(&b, radius).unwrap();
        prop_assert!((d - best).abs() <= 1e-12 * (1.0 + d));
        // Interior points never exceed the vertex maximum.
        let v: Vec<f64> = random_values(&mut r, n, radius);
        prop_assert!(sup_dist(&a.apply_raw(&v), &b.apply_raw(&v)) <= d + 1e-12);
    }
}

#[test]
fn constant_rewards_in_series_have_closed_form() {
    let mut r = rng(4);
    let (x, y) = (space("X", 3), space("Y", 2));
    let g = 0.7;
    let k1 = bellwire::random::random_kernel(&mut r, &x, &y, true);
    let k2 = bellwire::random::random_kernel(&mut r, &y, &x, true);
    let (c1, c2) = (0.4, -0.3);
    let t1 = Transformer::new(bellwire::value::ValueFn::constant(&x, c1), g, k1).unwrap();
    let t2 = Transformer::new(bellwire::value::ValueFn::constant(&y, c2), g, k2).unwrap();
    let c = CircuitExpr::series(CircuitExpr::transformer(&t1), CircuitExpr::transformer(&t2)).compile().unwrap();
    for v in [-2.0, 0.0, 1.5] {
        let want = c1 + g * c2 + g * g * v;
        for out in c.apply_raw(&[v; 3]) {
            assert!((out - want).abs() <= 1e-15, "{out} vs {want}");
        }
    }
}

#[test]
fn evaluation_by_iteration_matches_compilation() {
    let mut r = rng(8);
    for _ in 0..25 {
        let (x, y) = (space("X", 3), space("Y", 2));
        let g = 0.85;
        let a = random_transformer(&mut r, &x, &y, g).unwrap();
        let b = random_transformer(&mut r, &y, &x, g).unwrap();
        let loop_t = random_transformer(&mut r, &x, &x, g).unwrap();
        let v_max = loop_t.ball_out();
        let fixed = CircuitExpr::trace(
            CircuitExpr::series(
                CircuitExpr::leaf(duplicate(&x, v_max)),
                CircuitExpr::series(CircuitExpr::transformer(&loop_t), CircuitExpr::leaf(projection(&x, &x, true, v_max))),
            ),
            v_max,
        );
        let c = CircuitExpr::sum(
            CircuitExpr::series(CircuitExpr::transformer(&a), CircuitExpr::series(CircuitExpr::transformer(&b), fixed)),
            CircuitExpr::transformer(&b),
        );
        let op = c.compile().unwrap();
        let v = random_values(&mut r, op.out_space().size(), 1.0);
        let by_iteration = c.evaluate(&v, 1e-12).unwrap();
        assert!(sup_dist(&op.apply_raw(&v), &by_iteration) <= 1e-9);
    }
}

#[test]
fn randomized_contexts_obey_the_congruence_bound() {
    let mut r = rng(2024);
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..100 {
        let gamma = [0.5, 0.7, 0.9][i % 3];
        let d = random_context_draw(&mut r, gamma, 0.1, 0.2).unwrap();
        let rep = congruence_bound(&d.context, &d.filler, &d.perturbed).unwrap();
        assert!(rep.pass, "draw {i} ({}): {rep:?}", d.family);
        assert!(rep.bound.is_finite());
        seen.insert(d.family);
    }
    assert_eq!(seen.len(), FAMILIES.len());
}
