//! Real spherical harmonics up to degree 3 in the ordering used by 3DGS
//! checkpoints.

pub const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Basis values for a unit direction, `(degree + 1)^2` entries.
pub fn eval_basis(degree: usize, dir: [f64; 3], out: &mut Vec<f64>) {
    let [x, y, z] = dir;
    out.clear();
    out.push(C0);
    if degree == 0 {
        return;
    }
    out.extend_from_slice(&[-C1 * y, C1 * z, -C1 * x]);
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out.extend_from_slice(&[
        C2[0] * xy,
        C2[1] * yz,
        C2[2] * (2.0 * zz - xx - yy),
        C2[3] * xz,
        C2[4] * (xx - yy),
    ]);
    if degree == 2 {
        return;
    }
    out.extend_from_slice(&[
        C3[0] * y * (3.0 * xx - yy),
        C3[1] * xy * z,
        C3[2] * y * (4.0 * zz - xx - yy),
        C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        C3[4] * x * (4.0 * zz - xx - yy),
        C3[5] * z * (xx - yy),
        C3[6] * x * (xx - 3.0 * yy),
    ]);
}

/// DC coefficient that renders as `rgb` under degree-0 shading.
pub fn rgb_to_dc(rgb: f32) -> f32 {
    ((rgb as f64 - 0.5) / C0) as f32
}

pub fn dc_to_rgb(dc: f32) -> f64 {
    dc as f64 * C0 + 0.5
}
