//! Browser bindings: capacity table, channel-vs-pixel post-hoc DQ with
//! its code MI matrix, and a preview of the synthetic fields.
//!
//! Each export returns JSON (or raw pixels) so the page stays plain
//! JavaScript. The same functions run natively for tests.

use dq_core::info::{assign_stream, posthoc_density_estimate, InfoReport, PosthocConfig};
use dq_core::quantizer::{capacity, CapacityReport};
use dq_core::synth::{generate_synthetic, SyntheticSpec};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest K and M the page may request; keeps a click under a second.
const MAX_CODES: usize = 1024;
const MAX_BOOKS: usize = 16;

#[derive(Debug, Serialize)]
pub struct AxisResult {
    pub axis: &'static str,
    pub code_dim: usize,
    pub mean_l2: f64,
    pub mean_entropy: f64,
    pub mean_off_diagonal_mi: f64,
    /// Upper triangle with the diagonal; `null` below it.
    pub mi_matrix: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub num_books: usize,
    pub num_codes: usize,
    pub channel: AxisResult,
    pub pixel: AxisResult,
}

pub fn capacity_rows(codes: &[u32], max_books: u32) -> Vec<CapacityReport> {
    let max_books = (max_books as usize).clamp(1, MAX_BOOKS);
    codes
        .iter()
        .map(|&k| (k as usize).clamp(1, MAX_CODES))
        .flat_map(|k| (1..=max_books).map(move |m| capacity(k, m)))
        .collect()
}

fn field_spec(redundancy: f64, count: usize) -> SyntheticSpec {
    SyntheticSpec {
        shape: vec![16, 16, 4],
        channel_redundancy: redundancy,
        correlation_length: 1.5,
        noise: 0.1,
        count,
        rectify: true,
    }
}

/// Fits post-hoc DQ along the channel axis and along the row axis of the
/// same synthetic fields.
pub fn compare_axes(redundancy: f64, num_books: u32, num_codes: u32, seed: u32) -> Result<Comparison, String> {
    let num_books = (num_books as usize).clamp(1, MAX_BOOKS);
    let num_codes = (num_codes as usize).clamp(2, MAX_CODES);
    let data = generate_synthetic(&field_spec(redundancy, 128), seed as u64).map_err(|e| e.to_string())?;
    let run = |axis: usize, name: &'static str| -> Result<AxisResult, String> {
        let cfg = PosthocConfig {
            axis,
            num_books,
            num_codes,
            epochs: 5,
            seed: seed as u64,
            ..PosthocConfig::default()
        };
        let (report, q) = posthoc_density_estimate(&data, &cfg).map_err(|e| e.to_string())?;
        let (grids, _) = assign_stream(&q, &data, cfg.batch_size).map_err(|e| e.to_string())?;
        let info = InfoReport::from_grids(&grids, num_codes, "fit").map_err(|e| e.to_string())?;
        Ok(AxisResult {
            axis: name,
            code_dim: report.code_dim,
            mean_l2: report.mean_l2,
            mean_entropy: report.mean_entropy,
            mean_off_diagonal_mi: info.mean_off_diagonal_mi,
            mi_matrix: info.mi_matrix.rows(),
        })
    };
    Ok(Comparison {
        num_books,
        num_codes,
        channel: run(0, "channel")?,
        pixel: run(1, "pixel")?,
    })
}

/// One synthetic field as RGBA pixels, channels tiled left to right.
/// Returns `(width, height, rgba)`.
pub fn field_rgba(redundancy: f64, seed: u32) -> Result<(usize, usize, Vec<u8>), String> {
    let spec = field_spec(redundancy, 1);
    let t = generate_synthetic(&spec, seed as u64)
        .map_err(|e| e.to_string())?
        .remove(0);
    let (c, h, w) = (spec.shape[0], spec.shape[1], spec.shape[2]);
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    let width = c * (w + 1) - 1;
    let mut rgba = vec![255u8; width * h * 4];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = t.data()[(ch * h + y) * w + x];
                let g = (255.0 * (v - lo) / span).round() as u8;
                let i = (y * width + ch * (w + 1) + x) * 4;
                rgba[i..i + 3].fill(g);
            }
        }
    }
    Ok((width, h, rgba))
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = capacityTable)]
pub fn capacity_table(codes: Vec<u32>, max_books: u32) -> Result<String, JsError> {
    serde_json::to_string(&capacity_rows(&codes, max_books)).map_err(js_err)
}

#[wasm_bindgen(js_name = compareAxes)]
pub fn compare_axes_json(redundancy: f64, num_books: u32, num_codes: u32, seed: u32) -> Result<String, JsError> {
    let c = compare_axes(redundancy, num_books, num_codes, seed).map_err(js_err)?;
    serde_json::to_string(&c).map_err(js_err)
}

#[wasm_bindgen]
pub struct FieldImage {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl FieldImage {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

#[wasm_bindgen(js_name = fieldImage)]
pub fn field_image(redundancy: f64, seed: u32) -> Result<FieldImage, JsError> {
    let (width, height, rgba) = field_rgba(redundancy, seed).map_err(js_err)?;
    Ok(FieldImage { width, height, rgba })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_rows_cover_the_grid() {
        let rows = capacity_rows(&[32, 512], 3);
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[5].cost, 512 * 3);
        assert!((rows[5].capacity_nats - 3.0 * 512f64.ln()).abs() < 1e-12);
        assert_eq!(capacity_rows(&[1 << 20], 99).last().unwrap().num_books, MAX_BOOKS);
    }

    #[test]
    fn comparison_is_well_formed() {
        let c = compare_axes(0.9, 4, 16, 1).unwrap();
        for r in [&c.channel, &c.pixel] {
            assert_eq!(r.mi_matrix.len(), 4);
            assert!(r.mean_l2.is_finite() && r.mean_l2 >= 0.0);
            assert!(r.mean_entropy <= 16f64.ln() + 1e-12);
        }
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"channel\""));
    }

    #[test]
    fn field_image_has_a_gutter_per_channel() {
        let (w, h, px) = field_rgba(0.5, 3).unwrap();
        assert_eq!((w, h), (16 * 5 - 1, 16));
        assert_eq!(px.len(), w * h * 4);
        // gutter column stays white
        assert_eq!(&px[4 * 4..4 * 4 + 4], &[255, 255, 255, 255]);
    }
}
