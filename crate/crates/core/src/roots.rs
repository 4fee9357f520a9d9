//! Bracketed one-dimensional root finding.

/// Bisection on a bracket `[a, b]` with `f(a)` and `f(b)` of opposite sign (or zero).
///
/// Stops when the bracket is narrower than `tol` or after 200 halvings.
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> Option<f64> {
    let mut fa = f(a);
    let fb = f(b);
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if !(fa.is_finite() && fb.is_finite()) || fa.signum() == fb.signum() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if (b - a).abs() <= tol || mid == a || mid == b {
            return Some(mid);
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Some(mid);
        }
        if fm.signum() == fa.signum() {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    Some(0.5 * (a + b))
}

/// All sign changes of `f` on a uniform scan of `[a, b]` with `n` intervals, each
/// refined by bisection. Roots are returned in increasing order.
pub fn scan_roots<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize, tol: f64) -> Vec<f64> {
    let mut roots = Vec::new();
    let h = (b - a) / n as f64;
    let mut x0 = a;
    let mut f0 = f(x0);
    for i in 1..=n {
        let x1 = if i == n { b } else { a + i as f64 * h };
        let f1 = f(x1);
        if f0 == 0.0 {
            roots.push(x0);
        } else if f1 != 0.0 && f0.is_finite() && f1.is_finite() && f0.signum() != f1.signum() {
            if let Some(r) = bisect(&f, x0, x1, tol) {
                roots.push(r);
            }
        }
        x0 = x1;
        f0 = f1;
    }
    if f0 == 0.0 {
        roots.push(x0);
    }
    roots
}
