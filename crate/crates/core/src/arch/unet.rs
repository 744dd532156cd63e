use super::{level_channels, ArchError, ConcatRole, GraphBuilder, ModelKind, NetworkSpec, Rank, Stage};
use crate::autodiff::PoolMode;

/// Convolutions per encoder or decoder level.
const CONVS_PER_LEVEL: usize = 3;

/// Five-level UNet: three 3-kernel convolutions per level, max-pool down,
/// transposed convolution up, encoder features concatenated into the decoder.
pub fn build_unet(rank: Rank, width_scale: usize) -> Result<NetworkSpec, ArchError> {
    let ch = level_channels(width_scale)?;
    let mut g = GraphBuilder::new(rank);
    let mut x = 0;
    let mut skips = Vec::new();
    for (l, &c) in ch.iter().enumerate() {
        if l > 0 {
            x = g.pool(format!("enc{l}.pool"), x, PoolMode::Max);
        }
        x = g.conv_stack(&format!("enc{l}"), x, c, CONVS_PER_LEVEL);
        skips.push(x);
    }
    let endpoint = x;
    x = g.dropout("bottleneck.dropout", x);

    g.set_stage(Stage::Decoder);
    for l in (0..ch.len() - 1).rev() {
        let up = g.up(format!("dec{l}.up"), x, ch[l]);
        let cat = g.concat(format!("dec{l}.skip"), vec![up, skips[l]], ConcatRole::Skip);
        x = g.conv_stack(&format!("dec{l}"), cat, ch[l], CONVS_PER_LEVEL);
    }
    g.head(x);
    Ok(g.finish(ModelKind::UNet, width_scale, endpoint))
}
