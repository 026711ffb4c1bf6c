//! Deterministic synthetic handwritten-digit corpus.
//!
//! Renders digit glyphs from parametric stroke skeletons with per-image
//! affine distortion, elastic warp, stroke-weight variation, and pixel
//! noise, then writes standard MNIST-named IDX files. The corpus is a
//! drop-in stand-in for environments where the real files cannot be
//! fetched: same file names, headers, 28x28 geometry, and ten classes.
//! Every image is a pure function of `(master seed, split, index)`, so
//! regeneration is bit-identical.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const IMAGE_SIDE: usize = 28;
const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

#[derive(Clone, Copy, Debug)]
struct Pt {
    x: f32,
    y: f32,
}

fn pt(x: f32, y: f32) -> Pt {
    Pt { x, y }
}

/// Sample an elliptic arc in screen coordinates (y grows downward).
/// Angles in degrees; 0° points right, 90° points down.
fn arc(cx: f32, cy: f32, rx: f32, ry: f32, start_deg: f32, sweep_deg: f32, n: usize) -> Vec<Pt> {
    (0..=n)
        .map(|i| {
            let t = (start_deg + sweep_deg * i as f32 / n as f32).to_radians();
            pt(cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Stroke skeleton for one digit: a set of polylines in the unit square.
/// Some digits have structural variants picked per image.
fn skeleton(digit: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Pt>> {
    match digit {
        0 => vec![arc(0.5, 0.5, 0.26, 0.36, 0.0, 360.0, 24)],
        1 => {
            let mut strokes = vec![vec![pt(0.52, 0.13), pt(0.5, 0.87)]];
            if rng.gen_bool(0.7) {
                strokes.push(vec![pt(0.36, 0.3), pt(0.52, 0.13)]);
            }
            if rng.gen_bool(0.3) {
                strokes.push(vec![pt(0.36, 0.87), pt(0.64, 0.87)]);
            }
            strokes
        }
        2 => {
            let mut top = arc(0.5, 0.33, 0.24, 0.2, 180.0, 215.0, 14);
            let end = *top.last().unwrap();
            top.push(pt(end.x * 0.3 + 0.26 * 0.7, end.y * 0.3 + 0.85 * 0.7));
            top.push(pt(0.26, 0.85));
            vec![top, vec![pt(0.26, 0.85), pt(0.76, 0.85)]]
        }
        3 => vec![
            arc(0.47, 0.32, 0.22, 0.18, 210.0, 240.0, 16),
            arc(0.46, 0.66, 0.24, 0.19, 280.0, 230.0, 16),
        ],
        4 => {
            let top_y = if rng.gen_bool(0.5) { 0.12 } else { 0.18 };
            vec![
                vec![pt(0.64, top_y), pt(0.24, 0.62)],
                vec![pt(0.24, 0.62), pt(0.8, 0.62)],
                vec![pt(0.64, 0.3), pt(0.64, 0.88)],
            ]
        }
        5 => vec![
            vec![pt(0.72, 0.14), pt(0.32, 0.14)],
            vec![pt(0.32, 0.14), pt(0.3, 0.47)],
            arc(0.44, 0.63, 0.26, 0.2, 240.0, 240.0, 18),
        ],
        6 => vec![
            arc(0.85, 0.55, 0.45, 0.45, 200.0, 45.0, 10),
            arc(0.47, 0.64, 0.21, 0.2, 0.0, 360.0, 20),
        ],
        7 => {
            let mut strokes = vec![
                vec![pt(0.26, 0.16), pt(0.74, 0.16)],
                vec![pt(0.74, 0.16), pt(0.42, 0.86)],
            ];
            if rng.gen_bool(0.35) {
                strokes.push(vec![pt(0.38, 0.5), pt(0.66, 0.5)]);
            }
            strokes
        }
        8 => vec![
            arc(0.5, 0.31, 0.19, 0.16, 0.0, 360.0, 20),
            arc(0.5, 0.66, 0.22, 0.19, 0.0, 360.0, 20),
        ],
        9 => vec![
            arc(0.5, 0.34, 0.21, 0.19, 0.0, 360.0, 20),
            arc(0.25, 0.55, 0.46, 0.32, -40.0, 90.0, 12),
        ],
        _ => unreachable!("digit out of range"),
    }
}

/// Standard normal via Box-Muller.
fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = rng.gen_range(1e-7f32..1.0);
    let u2: f32 = rng.gen_range(0.0f32..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

/// Smooth low-frequency displacement field used for elastic distortion.
struct Warp {
    // two sinusoidal components per axis: (amplitude, fx, fy, phase)
    dx: [(f32, f32, f32, f32); 2],
    dy: [(f32, f32, f32, f32); 2],
}

impl Warp {
    fn sample(rng: &mut ChaCha8Rng, amplitude: f32) -> Self {
        let component = |rng: &mut ChaCha8Rng| {
            (
                rng.gen_range(0.3..1.0) * amplitude,
                rng.gen_range(0.5..1.9),
                rng.gen_range(0.5..1.9),
                rng.gen_range(0.0..std::f32::consts::TAU),
            )
        };
        Warp {
            dx: [component(rng), component(rng)],
            dy: [component(rng), component(rng)],
        }
    }

    fn apply(&self, x: f32, y: f32) -> (f32, f32) {
        let eval = |c: &[(f32, f32, f32, f32); 2]| {
            c.iter()
                .map(|&(a, fx, fy, ph)| a * (std::f32::consts::TAU * (fx * x + fy * y) + ph).sin())
                .sum::<f32>()
        };
        (x + eval(&self.dx), y + eval(&self.dy))
    }
}

fn dist_to_segment(p: Pt, a: Pt, b: Pt) -> f32 {
    let (vx, vy) = (b.x - a.x, b.y - a.y);
    let (wx, wy) = (p.x - a.x, p.y - a.y);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

struct StrokePass {
    segments: Vec<(Pt, Pt)>,
    half_width: f32,
    intensity: f32,
}

/// Render one digit image. The result has 28*28 entries in `[0,1]` and is a
/// pure function of `(label, seed)`.
pub fn render_digit(label: usize, seed: u64) -> Vec<f32> {
    assert!(label < 10, "digit label out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let strokes = skeleton(label, &mut rng);

    // Per-image handwriting parameters. Ranges are deliberately wide and
    // strokes deliberately faint: the corpus should sit near MNIST-level
    // difficulty (a small CNN reaches ~97-98%, not ~100%) so that
    // pixel-budget attacks have something to work with.
    let angle = rng.gen_range(-0.34f32..0.34);
    let scale_x = rng.gen_range(0.72f32..1.06);
    let scale_y = rng.gen_range(0.76f32..1.06);
    let shear = rng.gen_range(-0.3f32..0.3);
    let (tx, ty) = (rng.gen_range(-0.06f32..0.06), rng.gen_range(-0.05f32..0.05));
    let jitter = 0.019;
    let half_width = rng.gen_range(0.02f32..0.052);
    let ink = rng.gen_range(0.5f32..1.0);
    let warp_amplitude = rng.gen_range(0.012f32..0.042);
    let warp = Warp::sample(&mut rng, warp_amplitude);
    let noise_sigma = rng.gen_range(0.04f32..0.13);
    let background = rng.gen_range(0.03f32..0.17);

    let (sin_a, cos_a) = angle.sin_cos();
    let transform = |p: Pt, rng: &mut ChaCha8Rng| -> Pt {
        let jx = p.x + jitter * gauss(rng) - 0.5;
        let jy = p.y + jitter * gauss(rng) - 0.5;
        let sx = (jx + shear * jy) * scale_x;
        let sy = jy * scale_y;
        pt(
            cos_a * sx - sin_a * sy + 0.5 + tx,
            sin_a * sx + cos_a * sy + 0.5 + ty,
        )
    };

    let mut passes: Vec<StrokePass> = Vec::new();
    for stroke in strokes {
        let moved: Vec<Pt> = stroke.iter().map(|&p| transform(p, &mut rng)).collect();
        passes.push(StrokePass {
            segments: moved.windows(2).map(|w| (w[0], w[1])).collect(),
            half_width,
            intensity: ink,
        });
    }

    // Occasional clutter strokes keep the corpus from being trivially
    // separable.
    let clutter_count = if rng.gen_bool(0.45) { rng.gen_range(1..=2) } else { 0 };
    for _ in 0..clutter_count {
        let a = pt(rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95));
        let b = pt(
            (a.x + rng.gen_range(-0.3..0.3f32)).clamp(0.02, 0.98),
            (a.y + rng.gen_range(-0.3..0.3f32)).clamp(0.02, 0.98),
        );
        passes.push(StrokePass {
            segments: vec![(a, b)],
            half_width: rng.gen_range(0.01..0.024),
            intensity: rng.gen_range(0.2..0.6),
        });
    }

    let mut canvas = vec![0.0f32; PIXELS];
    let aa = 0.024f32; // soft edge half-width, ~0.7 px
    let inv = 1.0 / IMAGE_SIDE as f32;
    let max_warp: f32 = 0.06;

    for pass in &passes {
        for &(a, b) in &pass.segments {
            let pad = pass.half_width + aa + max_warp;
            let x0 = ((a.x.min(b.x) - pad) * IMAGE_SIDE as f32).floor().max(0.0) as usize;
            let x1 = ((a.x.max(b.x) + pad) * IMAGE_SIDE as f32).ceil().min(IMAGE_SIDE as f32) as usize;
            let y0 = ((a.y.min(b.y) - pad) * IMAGE_SIDE as f32).floor().max(0.0) as usize;
            let y1 = ((a.y.max(b.y) + pad) * IMAGE_SIDE as f32).ceil().min(IMAGE_SIDE as f32) as usize;
            for row in y0..y1 {
                for col in x0..x1 {
                    let px = (col as f32 + 0.5) * inv;
                    let py = (row as f32 + 0.5) * inv;
                    let (wx, wy) = warp.apply(px, py);
                    let d = dist_to_segment(pt(wx, wy), a, b);
                    let cover = ((pass.half_width + aa - d) / (2.0 * aa)).clamp(0.0, 1.0);
                    let v = cover * pass.intensity;
                    let cell = &mut canvas[row * IMAGE_SIDE + col];
                    *cell = cell.max(v);
                }
            }
        }
    }

    for cell in canvas.iter_mut() {
        *cell = (cell.max(background) + noise_sigma * gauss(&mut rng)).clamp(0.0, 1.0);
    }
    canvas
}

/// Stable mix of master seed, split tag, and image index.
fn image_seed(master: u64, split_salt: u64, index: u64) -> u64 {
    let mut z = master ^ split_salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn write_idx_pair(dir: &Path, images_name: &str, labels_name: &str, n: usize, master: u64, salt: u64) -> Result<()> {
    let mut image_bytes = Vec::with_capacity(16 + n * PIXELS);
    image_bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    image_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());

    let mut label_bytes = Vec::with_capacity(8 + n);
    label_bytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    label_bytes.extend_from_slice(&(n as u32).to_be_bytes());

    for idx in 0..n {
        let label = idx % 10;
        let pixels = render_digit(label, image_seed(master, salt, idx as u64));
        image_bytes.extend(pixels.iter().map(|&v| (v * 255.0).round() as u8));
        label_bytes.push(label as u8);
    }

    fs::write(dir.join(images_name), image_bytes)?;
    fs::write(dir.join(labels_name), label_bytes)?;
    Ok(())
}

const TRAIN_SALT: u64 = 0x7452_4149;
const TEST_SALT: u64 = 0x7445_5354;

/// Generate the full corpus (train + test IDX pairs) under `root`.
pub fn generate_corpus(root: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(root)?;
    write_idx_pair(
        root,
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        train_n,
        seed,
        TRAIN_SALT,
    )?;
    write_idx_pair(
        root,
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
        test_n,
        seed,
        TEST_SALT,
    )?;
    Ok(())
}

/// Generate the corpus only if the four IDX files are not already present
/// with the expected image counts. Returns true when generation ran.
pub fn ensure_corpus(root: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<bool> {
    let expected = [
        ("train-images-idx3-ubyte", 16 + train_n * PIXELS),
        ("train-labels-idx1-ubyte", 8 + train_n),
        ("t10k-images-idx3-ubyte", 16 + test_n * PIXELS),
        ("t10k-labels-idx1-ubyte", 8 + test_n),
    ];
    let present = expected.iter().all(|(name, size)| {
        fs::metadata(root.join(name))
            .map(|m| m.len() as usize == *size)
            .unwrap_or(false)
    });
    if present {
        return Ok(false);
    }
    generate_corpus(root, train_n, test_n, seed)?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let a = render_digit(3, 12345);
        let b = render_digit(3, 12345);
        assert_eq!(a, b);
        let c = render_digit(3, 12346);
        assert_ne!(a, c);
    }

    #[test]
    fn pixels_stay_in_unit_interval() {
        for label in 0..10 {
            let img = render_digit(label, 999 + label as u64);
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // A drawn digit has meaningful ink coverage.
            let ink: f32 = img.iter().sum();
            assert!(ink > 10.0, "digit {label} rendered almost empty: {ink}");
        }
    }

    #[test]
    fn corpus_files_have_exact_idx_headers() {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(dir.path(), 30, 20, 7).unwrap();
        let ds = crate::data::load_dataset(dir.path(), crate::data::DataFormat::Idx, crate::data::Split::Test).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.image_shape(), &[28, 28, 1]);
        assert_eq!(ds.num_classes, 10);

        // Regeneration is bit-identical.
        let before = std::fs::read(dir.path().join("t10k-images-idx3-ubyte")).unwrap();
        generate_corpus(dir.path(), 30, 20, 7).unwrap();
        let after = std::fs::read(dir.path().join("t10k-images-idx3-ubyte")).unwrap();
        assert_eq!(before, after);

        assert!(!ensure_corpus(dir.path(), 30, 20, 7).unwrap());
        assert!(ensure_corpus(dir.path(), 40, 20, 7).unwrap());
    }
}
