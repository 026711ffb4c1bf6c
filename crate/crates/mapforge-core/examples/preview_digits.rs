//! ASCII preview of the synthetic digit renderer (developer aid).
//!
//! Usage: cargo run -p mapforge-core --example preview_digits [seed]

use mapforge_core::data::synth::{render_digit, IMAGE_SIDE};

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let ramp: Vec<char> = " .:-=+*#%@".chars().collect();
    for digit in 0..10 {
        println!("--- digit {digit} (seeds {seed}..{}) ---", seed + 2);
        let images: Vec<Vec<f32>> = (0..3)
            .map(|i| render_digit(digit, seed + i as u64))
            .collect();
        for row in 0..IMAGE_SIDE {
            let mut line = String::new();
            for img in &images {
                for col in 0..IMAGE_SIDE {
                    let v = img[row * IMAGE_SIDE + col];
                    let idx = ((v * (ramp.len() - 1) as f32).round() as usize).min(ramp.len() - 1);
                    line.push(ramp[idx]);
                }
                line.push_str("  ");
            }
            println!("{line}");
        }
    }
}
