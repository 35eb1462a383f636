use crate::error::{Error, Result};

/// Interleaved `[sin(t·ω₀), cos(t·ω₀), sin(t·ω₁), …]` with frequencies
/// `ω_i = 10000^(-i / (dim/2))`.
pub fn sinusoidal_step_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!("embedding width must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let (s, c) = (t * freq).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_step() {
        let e = sinusoidal_step_embedding(0.0, 8).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(sinusoidal_step_embedding(1.0, 7).is_err());
    }

    #[test]
    fn steps_are_distinct_and_bounded() {
        let all: Vec<Vec<f64>> = (1..=1000)
            .map(|t| sinusoidal_step_embedding(t as f64, 64).unwrap())
            .collect();
        for e in &all {
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for i in 0..all.len() {
            for j in (i + 1)..all.len() {
                let d: f64 = all[i].iter().zip(&all[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6, "steps {} and {} collide", i + 1, j + 1);
            }
        }
    }
}
