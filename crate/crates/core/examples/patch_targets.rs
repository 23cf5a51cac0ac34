//! Patchifies a rendered scene, reconstructs it, and shows the per-patch
//! normalized regression targets.
//!
//! cargo run --example patch_targets -- [out_dir]

use aimv2_kit::data::{generate_scene, SceneSpec};
use aimv2_kit::patchify::{normalize_patch_targets, patchify, unpatchify, write_patch_grid, write_pnm, PATCH_NORM_EPS};

fn main() -> aimv2_kit::Result<()> {
    let scene = generate_scene(3, &SceneSpec::default())?;
    println!("caption: {}", scene.caption);
    let seq = patchify(&scene.image, 4)?;
    println!("{} patches of dim {} on a {:?} grid", seq.len(), seq.patch_dim(), seq.grid);
    assert_eq!(unpatchify(&seq, 4)?, scene.image);

    let targets = normalize_patch_targets(&seq, PATCH_NORM_EPS);
    let busy = (0..seq.len()).filter(|&i| seq.patches.row(i).iter().any(|&v| v != 0.0));
    for i in busy.take(3).chain([0]) {
        let row = targets.row(i);
        let mean = row.mean().unwrap_or(0.0);
        let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap_or(0.0);
        let raw = seq.patches.row(i).mean().unwrap_or(0.0);
        println!("patch {i:>2}: raw mean {raw:.3}  target mean {mean:+.1e} var {var:.4}");
    }

    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("aimv2-kit-patches"), Into::into);
    std::fs::create_dir_all(&dir).map_err(|e| aimv2_kit::Error::Io { path: dir.clone(), source: e })?;
    write_pnm(&scene.image, &dir.join("scene.ppm"))?;
    write_patch_grid(&seq, 4, &dir.join("patches.ppm"))?;
    println!("wrote {}", dir.display());
    Ok(())
}
