use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::correspondence::FlowField;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::store;

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        store::create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write(path, text)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    write(path, text + "\n")
}

/// One JSON object per line.
pub fn write_jsonl<S: Serialize>(path: &Path, records: &[S]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text += &serde_json::to_string(r).map_err(|e| Error::format(path, e.to_string()))?;
        text.push('\n');
    }
    write(path, text)
}

/// `frame,row,col,drow,dcol` for every token.
pub fn flow_csv(flow: &FlowField) -> String {
    let mut s = String::from("frame,row,col,drow,dcol\n");
    let per = flow.per_frame();
    for (i, &(dr, dc)) in flow.displacements().iter().enumerate() {
        let (f, p) = (i / per, i % per);
        let _ = writeln!(s, "{f},{},{},{dr},{dc}", p / flow.cols, p % flow.cols);
    }
    s
}

/// Binary PPM (P6) per frame of a `[F, H, W, c]` latent. The first three
/// channels become red, green and blue, each min-max mapped to 0–255 over the
/// whole video; missing channels are black.
pub fn write_frames<T: Scalar>(dir: &Path, latent: &Tensor<T>) -> Result<Vec<String>> {
    let [f, h, w, c]: [usize; 4] = latent
        .shape()
        .try_into()
        .map_err(|_| Error::shape(format!("frames need a rank-4 latent, got {:?}", latent.shape())))?;
    let data: Vec<f64> = latent.data().iter().map(|&v| Scalar::to_f64(v)).collect();
    let ranges: Vec<(f64, f64)> = (0..c.min(3))
        .map(|ch| {
            data.iter()
                .skip(ch)
                .step_by(c)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
        })
        .collect();
    let mut names = Vec::with_capacity(f);
    for frame in 0..f {
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        for px in 0..h * w {
            let base = (frame * h * w + px) * c;
            for ch in 0..3 {
                let byte = match ranges.get(ch) {
                    Some(&(lo, hi)) if hi > lo => ((data[base + ch] - lo) / (hi - lo) * 255.0).round() as u8,
                    _ => 0,
                };
                bytes.push(byte);
            }
        }
        let name = format!("frame_{frame:03}.ppm");
        write(&dir.join(&name), bytes)?;
        names.push(name);
    }
    Ok(names)
}
