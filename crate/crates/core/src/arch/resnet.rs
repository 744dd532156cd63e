use super::{level_channels, ArchError, ConcatRole, GraphBuilder, ModelKind, NetworkSpec, Rank, Stage};
use crate::autodiff::PoolMode;

/// Convolutions spanned by each residual concatenation.
pub const RESIDUAL_SPAN: usize = 3;

/// Two chained groups of three convolutions; the first group's output is
/// concatenated with the second's and projected back with a 1-kernel conv.
fn residual_level(g: &mut GraphBuilder, prefix: &str, input: usize, c: usize) -> usize {
    let g1 = g.conv_stack(&format!("{prefix}.g1"), input, c, RESIDUAL_SPAN);
    let g2 = g.conv_stack(&format!("{prefix}.g2"), g1, c, RESIDUAL_SPAN);
    let cat = g.concat(format!("{prefix}.residual"), vec![g1, g2], ConcatRole::Residual);
    g.conv1(format!("{prefix}.proj"), cat, c)
}

/// Residual encoder-decoder with concatenative shortcuts spanning three
/// convolutions.
pub fn build_resnet(rank: Rank, width_scale: usize) -> Result<NetworkSpec, ArchError> {
    let ch = level_channels(width_scale)?;
    let mut g = GraphBuilder::new(rank);
    let mut x = 0;
    let mut skips = Vec::new();
    for (l, &c) in ch.iter().enumerate() {
        if l > 0 {
            x = g.pool(format!("enc{l}.pool"), x, PoolMode::Max);
        }
        x = residual_level(&mut g, &format!("enc{l}"), x, c);
        skips.push(x);
    }
    let endpoint = x;
    x = g.dropout("bottleneck.dropout", x);

    g.set_stage(Stage::Decoder);
    for l in (0..ch.len() - 1).rev() {
        let up = g.up(format!("dec{l}.up"), x, ch[l]);
        let cat = g.concat(format!("dec{l}.skip"), vec![up, skips[l]], ConcatRole::Skip);
        x = residual_level(&mut g, &format!("dec{l}"), cat, ch[l]);
    }
    g.head(x);
    Ok(g.finish(ModelKind::ResNet, width_scale, endpoint))
}
