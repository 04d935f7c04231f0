// Thin wrappers so numeric code reads the same with or without std. With std
// the platform libm is used; it is markedly faster than the portable one.

macro_rules! unary {
    ($name:ident, $libm:ident) => {
        #[inline]
        pub fn $name(x: f64) -> f64 {
            #[cfg(feature = "std")]
            return f64::$name(x);
            #[cfg(not(feature = "std"))]
            return libm::$libm(x);
        }
    };
}

unary!(exp, exp);
unary!(ln, log);
unary!(ln_1p, log1p);
unary!(tanh, tanh);
unary!(sqrt, sqrt);
unary!(sin, sin);
unary!(cos, cos);
unary!(floor, floor);
unary!(round, round);
unary!(abs, fabs);

#[inline]
pub fn powf(x: f64, y: f64) -> f64 {
    #[cfg(feature = "std")]
    return f64::powf(x, y);
    #[cfg(not(feature = "std"))]
    return libm::pow(x, y);
}

/// Numerically stable `ln(1 + e^w)`.
#[inline]
pub fn softplus(w: f64) -> f64 {
    w.max(0.0) + ln_1p(exp(-abs(w)))
}

/// Logistic sigmoid, the derivative of [`softplus`].
#[inline]
pub fn sigmoid(w: f64) -> f64 {
    if w >= 0.0 {
        1.0 / (1.0 + exp(-w))
    } else {
        let e = exp(w);
        e / (1.0 + e)
    }
}
