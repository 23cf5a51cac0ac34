//! Model presets, their derived sizes, and loading a run configuration.
//!
//! cargo run --example config_presets -- [config.toml]

use aimv2_kit::config::{load_config, preset_model, ModelPreset, OptimConfig};
use aimv2_kit::decoder::DecoderParams;
use aimv2_kit::encoder::EncoderParams;
use aimv2_kit::nnprim::ParamTree;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aimv2_kit::Result<()> {
    for preset in ModelPreset::ALL {
        let m = preset_model(preset);
        let o = OptimConfig::paper(preset);
        println!(
            "{:<11} d_enc {:>4} x {:>2}  d_dec {:>4} x {:>2}  heads {:>2}  ffn {:>5}  p {:>2}  peak lr {:.0e}",
            preset.name(),
            m.d_enc,
            m.l_enc,
            m.d_dec,
            m.l_dec,
            m.heads_enc,
            m.ffn_hidden_enc,
            m.patch_size,
            o.peak_lr
        );
    }
    let tiny = preset_model(ModelPreset::DeskTiny);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = EncoderParams::init(&tiny, &mut rng);
    let dec = DecoderParams::init(&tiny, &mut rng);
    println!("desk_tiny parameters: encoder {}  decoder {}", enc.num_params(), dec.num_params());

    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk_tiny.toml").into());
    let cfg = load_config(path.as_ref())?;
    println!("{path}: seed {} hash {:016x}\n{}", cfg.seed, cfg.hash(), cfg.to_toml());
    Ok(())
}
