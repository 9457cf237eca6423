//! Write a small procedural dataset and a matching config:
//!
//! ```text
//! cargo run --release -p nst-core --example demo_data -- demo
//! nst --config demo/config.toml train
//! ```

use std::path::PathBuf;

use nst_core::fixtures::{self, Texture};

const CONFIG: &str = r#"# Desk-scale demo: procedural scenes, synthetic backbone, small network.
[train]
epochs = 20
batch_size = 2
learning_rate = 1e-3
train_resolution = [64, 64]
content_dir = "content"
log_every = 10

[train.arch]
base_channels = 16
residual_blocks = 3

[train.backbone]
synthetic_seed = 0

[[train.styles]]
style_id = "rust_stripes"
display_name = "Rust stripes"
image = "styles/rust_stripes.png"

[[train.styles]]
style_id = "checker"
display_name = "Checker"
image = "styles/checker.png"

[[train.styles]]
style_id = "blobs"
display_name = "Blobs"
image = "styles/blobs.png"

[sweep]
held_out_count = 2

[bench]
repeats = 3
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "demo".into()));
    std::fs::create_dir_all(out.join("content"))?;
    std::fs::create_dir_all(out.join("styles"))?;
    for (i, img) in fixtures::content_set(10, 96, 96, 100).iter().enumerate() {
        img.save_png(&out.join("content").join(format!("scene_{i:02}.png")))?;
    }
    let styles = [
        ("rust_stripes", fixtures::default_style(128, 128)),
        ("checker", fixtures::texture(Texture::Checker { cell: 8, a: [0.05; 3], b: [0.95, 0.9, 0.8] }, 128, 128)),
        ("blobs", fixtures::texture(Texture::Blobs { count: 40, seed: 11 }, 128, 128)),
    ];
    for (name, img) in &styles {
        img.save_png(&out.join("styles").join(format!("{name}.png")))?;
    }
    std::fs::write(out.join("config.toml"), CONFIG)?;
    println!("{}", out.join("config.toml").display());
    Ok(())
}
