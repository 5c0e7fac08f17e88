//! Renders a scene, stitches the six views, encodes a subset of patches and
//! shows that ViT work scales exactly with the number of patches.

use litevlm::corpus::{gen_scene, render_all};
use litevlm::nn::Meter;
use litevlm::vision::{extract_patches, stitch_views, vision_init, vit_encode, PatchMask, VisionConfig, VisionEncoder};

fn main() -> litevlm::Result<()> {
    let cfg = VisionConfig { d_model: 16, n_heads: 2, n_layers: 1, d_ff: 32, d_out: 32, seed: 3 };
    let encoder = VisionEncoder::from_params(&cfg, &vision_init(&cfg)?)?;
    let scene = gen_scene(0, 3);
    let composite = stitch_views(&render_all(&scene))?;
    println!("composite {:?}", composite.pixels.shape());

    for views in [vec![0usize], vec![0, 1], vec![0, 1, 2, 3, 4, 5]] {
        let mask = PatchMask::from_views(&views);
        let patches = extract_patches(&composite, &mask)?;
        let meter = Meter::new();
        let out = vit_encode(&patches, &encoder, &meter)?;
        println!(
            "views {views:?}: {} patches -> {} tokens x {}, {} madds ({} per patch)",
            patches.len(),
            out.tokens.rows(),
            out.tokens.cols(),
            meter.madds(),
            cfg.patch_madds()
        );
        assert_eq!(meter.madds(), patches.len() as u64 * cfg.patch_madds());
    }
    Ok(())
}
