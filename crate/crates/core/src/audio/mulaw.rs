use crate::error::{Error, Result};

/// 10-bit companding: 1024 levels, μ = 1023.
pub const MULAW_LEVELS: u32 = 1024;

/// Maps an amplitude in `[-1, 1]` to a μ-law level index in `[0, levels)`.
pub fn mulaw_encode(x: f64, levels: u32) -> Result<u32> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("mu-law input {x}")));
    }
    check_levels(levels)?;
    let mu = (levels - 1) as f64;
    let x = x.clamp(-1.0, 1.0);
    let y = x.signum() * (mu * x.abs()).ln_1p() / mu.ln_1p();
    let level = ((y + 1.0) / 2.0 * levels as f64).floor();
    Ok(level.clamp(0.0, (levels - 1) as f64) as u32)
}

/// Inverse companding of the centre of `level`'s bin.
pub fn mulaw_decode(level: u32, levels: u32) -> Result<f64> {
    check_levels(levels)?;
    if level >= levels {
        return Err(Error::OutOfRange(format!(
            "mu-law level {level} not below {levels}"
        )));
    }
    let mu = (levels - 1) as f64;
    let y = (level as f64 + 0.5) / levels as f64 * 2.0 - 1.0;
    Ok(y.signum() * ((1.0 + mu).powf(y.abs()) - 1.0) / mu)
}

fn check_levels(levels: u32) -> Result<()> {
    if levels < 2 {
        return Err(Error::OutOfRange(format!("mu-law needs >= 2 levels, got {levels}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const L: u32 = MULAW_LEVELS;

    // closed-form companded value of x, in [-1, 1]
    fn compand(x: f64) -> f64 {
        let mu = (L - 1) as f64;
        x.signum() * (1.0 + mu * x.abs()).ln() / (1.0 + mu).ln()
    }

    fn expand(y: f64) -> f64 {
        let mu = (L - 1) as f64;
        y.signum() * ((1.0 + mu).powf(y.abs()) - 1.0) / mu
    }

    /// Width in amplitude of the level containing `x`.
    fn step_width_at(x: f64) -> f64 {
        let y = compand(x);
        let k = ((y + 1.0) / 2.0 * L as f64).floor().clamp(0.0, (L - 1) as f64);
        let lo = k / L as f64 * 2.0 - 1.0;
        let hi = (k + 1.0) / L as f64 * 2.0 - 1.0;
        expand(hi) - expand(lo)
    }

    #[test]
    fn midpoint_and_endpoints() {
        assert_eq!(mulaw_encode(0.0, L).unwrap(), 512);
        assert_eq!(mulaw_encode(1.0, L).unwrap(), 1023);
        assert_eq!(mulaw_encode(-1.0, L).unwrap(), 0);
    }

    #[test]
    fn point_three_round_trips() {
        let level = mulaw_encode(0.3, L).unwrap();
        assert!((mulaw_decode(level, L).unwrap() - 0.3).abs() < 0.01);
    }

    #[test]
    fn decode_reference_levels() {
        let smallest_step = expand(2.0 / L as f64);
        let a = mulaw_decode(512, L).unwrap();
        assert!(a.abs() <= smallest_step / 2.0, "{a} vs {smallest_step}");
        let top = mulaw_decode(1023, L).unwrap();
        assert!(top > 0.99 && top <= 1.0);
        let bottom = mulaw_decode(0, L).unwrap();
        assert!((-1.0..-0.99).contains(&bottom));
    }

    #[test]
    fn errors() {
        assert!(mulaw_encode(f64::NAN, L).is_err());
        assert!(mulaw_decode(L, L).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_local_step(x in -1.0f64..=1.0) {
            let d = mulaw_decode(mulaw_encode(x, L).unwrap(), L).unwrap();
            prop_assert!((d - x).abs() <= step_width_at(x) + 1e-12);
        }

        #[test]
        fn encode_is_monotone(a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(mulaw_encode(lo, L).unwrap() <= mulaw_encode(hi, L).unwrap());
        }
    }
}
