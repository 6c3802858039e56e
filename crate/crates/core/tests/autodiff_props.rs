use featgen::autodiff::{Array, AutodiffError, Bindings, Graph, Shape};
use ndarray::array;
use proptest::prelude::*;

fn grad_of(
    build: impl Fn(&mut Graph, featgen::NodeRef) -> featgen::NodeRef,
    x: &Array,
) -> (f64, Array) {
    let mut g = Graph::new();
    let xn = g.input(Shape::new(x.nrows(), x.ncols()));
    let y = build(&mut g, xn);
    let dx = g.gradients(y, &[xn]).unwrap()[0];
    let mut b = Bindings::new();
    b.bind(xn, x);
    let v = g.forward(&b).unwrap();
    (v.scalar(y), v.to_owned(dx))
}

#[test]
fn sigmoid_slope_at_zero_is_quarter() {
    let x = array![[0.0]];
    let (y, d) = grad_of(
        |g, x| {
            let s = g.sigmoid(x).unwrap();
            g.sum(s).unwrap()
        },
        &x,
    );
    assert!((y - 0.5).abs() < 1e-15);
    assert!((d[[0, 0]] - 0.25).abs() < 1e-15);
}

#[test]
fn exp_is_its_own_derivative() {
    let x = array![[1.0, -2.0]];
    let (_, d) = grad_of(
        |g, x| {
            let e = g.exp(x).unwrap();
            g.sum(e).unwrap()
        },
        &x,
    );
    assert!((d[[0, 0]] - 1f64.exp()).abs() < 1e-12);
    assert!((d[[0, 1]] - (-2f64).exp()).abs() < 1e-12);
}

#[test]
fn row_norm_of_three_four() {
    let x = array![[3.0, 4.0]];
    let (y, d) = grad_of(
        |g, x| {
            let n = g.row_norm(x).unwrap();
            g.sum(n).unwrap()
        },
        &x,
    );
    assert!((y - 5.0).abs() < 1e-15);
    assert!((d[[0, 0]] - 0.6).abs() < 1e-15);
    assert!((d[[0, 1]] - 0.8).abs() < 1e-15);
}

#[test]
fn zero_row_norm_has_zero_gradient() {
    let x = array![[0.0, 0.0], [1.0, 0.0]];
    let (_, d) = grad_of(
        |g, x| {
            let n = g.row_norm(x).unwrap();
            g.sum(n).unwrap()
        },
        &x,
    );
    assert_eq!(d, array![[0.0, 0.0], [1.0, 0.0]]);
}

#[test]
fn shape_mismatch_is_typed() {
    let mut g = Graph::new();
    let a = g.input(Shape::new(2, 3));
    let b = g.input(Shape::new(3, 2));
    assert!(matches!(g.add(a, b), Err(AutodiffError::ShapeMismatch { .. })));
    assert!(g.matmul(a, a).is_err());
}

#[test]
fn unbound_input_is_typed() {
    let mut g = Graph::new();
    let a = g.input(Shape::new(1, 1));
    let s = g.sum(a).unwrap();
    let b = Bindings::new();
    assert!(matches!(g.forward(&b), Err(AutodiffError::UnboundInput { .. })));
    let _ = s;
}

#[test]
fn second_derivative_of_cube() {
    // d/dx sum(x^3) = 3x^2, then d/dx sum(3x^2) = 6x
    let mut g = Graph::new();
    let x = g.input(Shape::new(1, 3));
    let sq = g.square(x).unwrap();
    let cube = g.mul(sq, x).unwrap();
    let y = g.sum(cube).unwrap();
    let d1 = g.gradients(y, &[x]).unwrap()[0];
    let s1 = g.sum(d1).unwrap();
    let d2 = g.gradients(s1, &[x]).unwrap()[0];
    let xv = array![[1.0, -2.0, 0.5]];
    let mut b = Bindings::new();
    b.bind(x, &xv);
    let v = g.forward(&b).unwrap();
    assert_eq!(v.to_owned(d1), array![[3.0, 12.0, 0.75]]);
    assert_eq!(v.to_owned(d2), array![[6.0, -12.0, 3.0]]);
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Array::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_is_linear_in_the_output(x in matrix(3, 4), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        // grad(a f + b h) = a grad f + b grad h
        let f = |g: &mut Graph, x| {
            let t = g.sigmoid(x).unwrap();
            g.sum(t).unwrap()
        };
        let h = |g: &mut Graph, x| {
            let t = g.square(x).unwrap();
            g.mean(t).unwrap()
        };
        let (_, gf) = grad_of(f, &x);
        let (_, gh) = grad_of(h, &x);
        let (_, gc) = grad_of(
            |g, x| {
                let fx = f(g, x);
                let hx = h(g, x);
                let fa = g.scale(fx, a).unwrap();
                let hb = g.scale(hx, b).unwrap();
                g.add(fa, hb).unwrap()
            },
            &x,
        );
        let want = &gf * a + &gh * b;
        for (p, q) in gc.iter().zip(want.iter()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic(x in matrix(4, 3), w in matrix(3, 2)) {
        let run = || {
            let mut g = Graph::new();
            let xn = g.input(Shape::new(4, 3));
            let wn = g.constant(w.clone());
            let z = g.matmul(xn, wn).unwrap();
            let l = g.logsumexp_rows(z).unwrap();
            let y = g.mean(l).unwrap();
            let d = g.gradients(y, &[xn]).unwrap()[0];
            let mut b = Bindings::new();
            b.bind(xn, &x);
            let v = g.forward(&b).unwrap();
            (v.scalar(y).to_bits(), v.to_owned(d))
        };
        let (y1, d1) = run();
        let (y2, d2) = run();
        prop_assert_eq!(y1, y2);
        prop_assert_eq!(d1, d2);
    }

    #[test]
    fn logsumexp_bounds(x in matrix(2, 5)) {
        let mut g = Graph::new();
        let xn = g.input(Shape::new(2, 5));
        let l = g.logsumexp_rows(xn).unwrap();
        let mut b = Bindings::new();
        b.bind(xn, &x);
        let v = g.forward(&b).unwrap();
        for (i, row) in x.rows().into_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let got = v.get(l)[[i, 0]];
            prop_assert!(got >= m - 1e-12 && got <= m + 5f64.ln() + 1e-12);
        }
    }

    #[test]
    fn check_gradient_accepts_smooth_composites(x in matrix(2, 3)) {
        let mut g = Graph::new();
        let xn = g.input(Shape::new(2, 3));
        let s = g.sigmoid(xn).unwrap();
        let e = g.exp(s).unwrap();
        let n = g.row_norm(e).unwrap();
        let y = g.sum(n).unwrap();
        let mut b = Bindings::new();
        b.bind(xn, &x);
        let err = g.check_gradient(y, xn, &b, 1e-5).unwrap();
        prop_assert!(err < 1e-6, "relative error {}", err);
    }
}
