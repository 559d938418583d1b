//! Procedural face-like frames.
//!
//! A group draws one identity (background, skin tone, geometry, lighting);
//! its 16 clips each draw a head offset and expression, and the 5 frames of
//! a clip drift slightly from it. Sensor noise is independent per frame.

use std::f32::consts::TAU;
use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageReader, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::fingerprint::PreparedArtifact;
use super::CLIPS_PER_GROUP;
use crate::backbone::INPUT_SIZE;
use crate::error::Result;
use crate::label::Label;

const SIZE: usize = INPUT_SIZE;

struct Identity {
    bg: [[f32; 3]; 2],
    bg_dir: (f32, f32),
    blobs: Vec<(f32, f32, f32, [f32; 3])>,
    skin: [f32; 3],
    hair: [f32; 3],
    lips: [f32; 3],
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    hairline: f32,
    eye_spread: f32,
    eye_size: f32,
    light: (f32, f32),
    texture: Vec<(f32, f32, f32, f32)>,
    artifact_gain: f32,
}

struct Pose {
    dx: f32,
    dy: f32,
    mouth_open: f32,
    blink: bool,
    brightness: f32,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * rng.random::<f32>()
}

fn color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> [f32; 3] {
    [uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)]
}

impl Identity {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let t = rng.random::<f32>();
        let light_skin = [232.0, 192.0, 164.0];
        let dark_skin = [112.0, 76.0, 56.0];
        let mut skin = [0.0; 3];
        for c in 0..3 {
            skin[c] = light_skin[c] * (1.0 - t) + dark_skin[c] * t + uniform(rng, -10.0, 10.0);
        }
        let angle = uniform(rng, 0.0, TAU);
        let light_angle = uniform(rng, 0.0, TAU);
        let blobs = (0..3)
            .map(|_| (uniform(rng, 0.0, SIZE as f32), uniform(rng, 0.0, SIZE as f32), uniform(rng, 10.0, 35.0), color(rng, 20.0, 230.0)))
            .collect();
        let texture = (0..4)
            .map(|_| (uniform(rng, 0.05, 0.35), uniform(rng, 0.05, 0.35), uniform(rng, 0.0, TAU), uniform(rng, 1.0, 4.0)))
            .collect();
        let hair_base = uniform(rng, 15.0, 90.0);
        Self {
            bg: [color(rng, 30.0, 220.0), color(rng, 30.0, 220.0)],
            bg_dir: (angle.cos(), angle.sin()),
            blobs,
            skin,
            hair: [hair_base * uniform(rng, 1.0, 1.5), hair_base * uniform(rng, 0.8, 1.1), hair_base * uniform(rng, 0.6, 0.9)],
            lips: [uniform(rng, 150.0, 200.0), uniform(rng, 55.0, 95.0), uniform(rng, 60.0, 95.0)],
            cx: 64.0 + uniform(rng, -4.0, 4.0),
            cy: 68.0 + uniform(rng, -4.0, 4.0),
            rx: uniform(rng, 27.0, 33.0),
            ry: uniform(rng, 35.0, 41.0),
            hairline: uniform(rng, 0.35, 0.6),
            eye_spread: uniform(rng, 0.36, 0.44),
            eye_size: uniform(rng, 0.85, 1.15),
            light: (light_angle.cos() * uniform(rng, 0.05, 0.2), light_angle.sin() * uniform(rng, 0.05, 0.2)),
            texture,
            artifact_gain: uniform(rng, 0.8, 1.2),
        }
    }
}

fn soft_ellipse(x: f32, y: f32, cx: f32, cy: f32, rx: f32, ry: f32, edge: f32) -> f32 {
    let d = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
    // signed distance approximated in pixels along the minor radius
    let px = (1.0 - d) * rx.min(ry);
    (px / edge + 0.5).clamp(0.0, 1.0)
}

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Renders a frame into `[0, 255]` floats and returns the manipulation mask.
fn render(id: &Identity, pose: &Pose, img: &mut [f32], mask: &mut [f32]) {
    let cx = id.cx + pose.dx;
    let cy = id.cy + pose.dy;
    let (rx, ry) = (id.rx, id.ry);
    let eye_y = cy - ry * 0.15;
    let eye_rx = rx * 0.16 * id.eye_size;
    let eye_ry = if pose.blink { 0.6 } else { ry * 0.07 * id.eye_size };
    let mouth_y = cy + ry * 0.45;
    for y in 0..SIZE {
        for x in 0..SIZE {
            let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
            let p = y * SIZE + x;

            let t = (((xf - 64.0) * id.bg_dir.0 + (yf - 64.0) * id.bg_dir.1) / 128.0 + 0.5).clamp(0.0, 1.0);
            let mut c = lerp(id.bg[0], id.bg[1], t);
            for &(bx, by, br, bc) in &id.blobs {
                let w = (-((xf - bx).powi(2) + (yf - by).powi(2)) / (2.0 * br * br)).exp() * 0.5;
                c = lerp(c, bc, w);
            }

            let hair = soft_ellipse(xf, yf, cx, cy - ry * 0.05, rx * 1.1, ry * 1.08, 1.5)
                * ((cy - ry * id.hairline - yf) / 2.0 + 0.5).clamp(0.0, 1.0);
            let face = soft_ellipse(xf, yf, cx, cy, rx, ry, 1.5);
            if face > 0.0 {
                let mut s = id.skin;
                let shade = 1.0 + id.light.0 * (xf - cx) / rx + id.light.1 * (yf - cy) / ry;
                let mut tex = 0.0;
                for &(fx, fy, ph, a) in &id.texture {
                    tex += a * (fx * xf + fy * yf + ph).sin();
                }
                for v in s.iter_mut() {
                    *v = *v * shade * pose.brightness + tex;
                }
                // nose shadow
                let nose = (-((xf - cx - rx * 0.05).powi(2) / 8.0) - ((yf - cy - ry * 0.12).powi(2) / 60.0)).exp();
                s = lerp(s, [s[0] * 0.8, s[1] * 0.78, s[2] * 0.78], nose * 0.6);
                for side in [-1.0, 1.0] {
                    let ex = cx + side * rx * id.eye_spread;
                    let brow = soft_ellipse(xf, yf, ex, eye_y - ry * 0.12, eye_rx * 1.2, 1.6, 1.0);
                    s = lerp(s, id.hair, brow * 0.9);
                    let sclera = soft_ellipse(xf, yf, ex, eye_y, eye_rx, eye_ry, 1.0);
                    s = lerp(s, [235.0, 232.0, 228.0], sclera);
                    let iris = soft_ellipse(xf, yf, ex, eye_y, eye_rx * 0.45, eye_ry, 1.0);
                    s = lerp(s, [40.0, 32.0, 28.0], iris);
                }
                let mouth = soft_ellipse(xf, yf, cx, mouth_y, rx * 0.35, 2.0 + pose.mouth_open, 1.0);
                s = lerp(s, id.lips, mouth);
                let inner = soft_ellipse(xf, yf, cx, mouth_y, rx * 0.25, pose.mouth_open * 0.7, 1.0);
                s = lerp(s, [60.0, 20.0, 25.0], inner);
                c = lerp(c, s, face);
            }
            c = lerp(c, id.hair, hair);

            img[p * 3..p * 3 + 3].copy_from_slice(&c);
            mask[p] = soft_ellipse(xf, yf, cx, cy + ry * 0.05, rx * 0.88, ry * 0.8, 1.0) * (1.0 - hair);
        }
    }
}

fn jpeg_round_trip(img: RgbImage, quality: u8) -> Result<RgbImage> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode_image(&img)?;
    let decoded = ImageReader::with_format(Cursor::new(buf), image::ImageFormat::Jpeg).decode()?;
    Ok(decoded.to_rgb8())
}

pub(crate) fn render_group(seed: u64, frames: usize, label: Label, artifact: &PreparedArtifact, quality: Option<u8>) -> Result<Vec<RgbImage>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = Identity::draw(&mut rng);
    let noise = Normal::new(0.0f32, 3.0).expect("positive std");
    let per_clip = frames.div_ceil(CLIPS_PER_GROUP).max(1);
    let mut img = vec![0.0f32; SIZE * SIZE * 3];
    let mut mask = vec![0.0f32; SIZE * SIZE];
    let mut out = Vec::with_capacity(frames);
    let mut clip = Pose { dx: 0.0, dy: 0.0, mouth_open: 0.0, blink: false, brightness: 1.0 };
    for f in 0..frames {
        if f % per_clip == 0 {
            clip = Pose {
                dx: uniform(&mut rng, -3.0, 3.0),
                dy: uniform(&mut rng, -3.0, 3.0),
                mouth_open: uniform(&mut rng, 0.0, 4.0),
                blink: false,
                brightness: uniform(&mut rng, 0.95, 1.05),
            };
        }
        let step = (f % per_clip) as f32;
        let pose = Pose {
            dx: clip.dx + step * uniform(&mut rng, -0.3, 0.3),
            dy: clip.dy + step * uniform(&mut rng, -0.3, 0.3),
            mouth_open: (clip.mouth_open + uniform(&mut rng, -0.5, 0.5)).max(0.0),
            blink: rng.random::<f32>() < 0.08,
            brightness: clip.brightness,
        };
        render(&id, &pose, &mut img, &mut mask);
        if label == Label::Fake {
            artifact.apply(&mut img, &mask, SIZE, id.artifact_gain);
        }
        let bytes: Vec<u8> = img.iter().map(|&v| (v + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8).collect();
        let frame = RgbImage::from_raw(SIZE as u32, SIZE as u32, bytes).expect("buffer matches dimensions");
        out.push(match quality {
            Some(q) => jpeg_round_trip(frame, q)?,
            None => frame,
        });
    }
    Ok(out)
}
