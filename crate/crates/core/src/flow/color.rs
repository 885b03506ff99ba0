//! Flow fields as color images.
//!
//! For a vector `(du, dv)` with magnitude `m = min(|(du, dv)| / max_magnitude, 1)`
//! and hue `atan2(dv, du)` (degrees, mapped to `[0, 360)`):
//!
//! ```text
//! rgb = round(255 · ((1 - m) · 0.5 + m · hsv(hue, 1, 1)))
//! ```
//!
//! Zero motion renders as mid-gray `(128, 128, 128)`; motion at or beyond
//! `max_magnitude` renders as the fully saturated hue.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn hsv_full(hue_deg: f64) -> [f64; 3] {
    let h = hue_deg / 60.0;
    let sector = h.floor() as i64 % 6;
    let f = h - h.floor();
    let (q, t) = (1.0 - f, f);
    match sector {
        0 => [1.0, t, 0.0],
        1 => [q, 1.0, 0.0],
        2 => [0.0, 1.0, t],
        3 => [0.0, q, 1.0],
        4 => [t, 0.0, 1.0],
        _ => [1.0, 0.0, q],
    }
}

pub fn flow_to_rgb(du: f64, dv: f64, max_magnitude: f64) -> [u8; 3] {
    let mag = (du * du + dv * dv).sqrt();
    let m = if max_magnitude > 0.0 { (mag / max_magnitude).min(1.0) } else { 0.0 };
    let mut hue = dv.atan2(du).to_degrees();
    if hue < 0.0 {
        hue += 360.0;
    }
    let c = hsv_full(hue);
    c.map(|v| (255.0 * ((1.0 - m) * 0.5 + m * v)).round() as u8)
}

/// Binary PPM (`P6`) of a `(2, H, W)` flow field.
pub fn flow_to_ppm(flow: &Tensor<f32>, max_magnitude: f64) -> Result<Vec<u8>> {
    if flow.rank() != 3 || flow.shape()[0] != 2 {
        return Err(Error::Shape(format!("flow must be (2, H, W), got {:?}", flow.shape())));
    }
    let (h, w) = (flow.shape()[1], flow.shape()[2]);
    let p = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for q in 0..p {
        let rgb = flow_to_rgb(flow.data()[q] as f64, flow.data()[p + q] as f64, max_magnitude);
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_motion_is_mid_gray() {
        assert_eq!(flow_to_rgb(0.0, 0.0, 4.0), [128, 128, 128]);
        let ppm = flow_to_ppm(&Tensor::zeros(&[2, 3, 5]).unwrap(), 4.0).unwrap();
        let header = b"P6\n5 3\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert!(ppm[header.len()..].iter().all(|&v| v == 128));
        assert_eq!(ppm.len(), header.len() + 45);
    }

    #[test]
    fn saturated_primaries() {
        assert_eq!(flow_to_rgb(5.0, 0.0, 5.0), [255, 0, 0]);
        assert_eq!(flow_to_rgb(-9.0, 0.0, 5.0), [0, 255, 255]);
        assert_eq!(flow_to_rgb(0.0, 1.0, 0.5), [128, 255, 0]);
    }
}
