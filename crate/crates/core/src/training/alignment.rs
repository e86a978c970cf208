//! Alignment diagnostics: diagonality score and CSV / PGM export.

use std::io::Write;
use std::path::Path;

use super::TrainingError;
use crate::tensor::Tensor;

/// Half-width of the band around the ideal diagonal, in normalized time.
pub const DIAGONAL_BAND: f64 = 0.15;

/// Mass of `alignment: [t_dec, t_x]` inside the band
/// `|j/t_x − i/t_dec| < 0.15`, averaged over decoder steps (0-based indices).
pub fn diagonality(alignment: &Tensor) -> f64 {
    assert_eq!(alignment.rank(), 2, "alignment must be [t_dec, t_x]");
    let (t_dec, t_x) = (alignment.dim(0), alignment.dim(1));
    if t_dec == 0 || t_x == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..t_dec {
        let row = &alignment.data()[i * t_x..(i + 1) * t_x];
        let u = i as f64 / t_dec as f64;
        for (j, a) in row.iter().enumerate() {
            if (j as f64 / t_x as f64 - u).abs() < DIAGONAL_BAND {
                total += a;
            }
        }
    }
    total / t_dec as f64
}

/// One row per decoder step, comma separated.
pub fn write_alignment_csv(path: impl AsRef<Path>, alignment: &Tensor) -> Result<(), TrainingError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let t_x = alignment.dim(1);
    for row in alignment.data().chunks(t_x.max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Plain (P2) grayscale image: width `t_x`, height `t_dec`, pixel
/// `round(255·α)`.
pub fn write_alignment_pgm(path: impl AsRef<Path>, alignment: &Tensor) -> Result<(), TrainingError> {
    let (t_dec, t_x) = (alignment.dim(0), alignment.dim(1));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "P2\n{t_x} {t_dec}\n255")?;
    for row in alignment.data().chunks(t_x.max(1)) {
        let px: Vec<String> = row.iter().map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string()).collect();
        writeln!(f, "{}", px.join(" "))?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a plain PGM written by [`write_alignment_pgm`] back into weights,
/// renormalizing each row to sum to one (rows of zeros stay zero).
pub fn read_alignment_pgm(path: impl AsRef<Path>) -> Result<Tensor, TrainingError> {
    let text = std::fs::read_to_string(path)?;
    let bad = |m: &str| TrainingError::Format(format!("PGM: {m}"));
    let mut tokens = text.split_whitespace().filter(|t| !t.starts_with('#'));
    if tokens.next() != Some("P2") {
        return Err(bad("missing P2 magic"));
    }
    let mut num = || -> Result<usize, TrainingError> { tokens.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad number")) };
    let (w, h, max) = (num()?, num()?, num()?);
    if max == 0 {
        return Err(bad("zero maxval"));
    }
    let mut data = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        data.push(num()? as f64);
    }
    for row in data.chunks_mut(w.max(1)) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(Tensor::new(&[h, w], data))
}
