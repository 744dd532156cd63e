use super::{level_channels, split_branches, ArchError, ConcatRole, GraphBuilder, ModelKind, NetworkSpec, Rank, Stage};

/// Levels (from the finest) that additionally carry the factorized block.
const FACTORIZED_LEVELS: usize = 2;
const FACTORIZED_EXTENT: usize = 7;

/// 1-kernel branch beside a 1 -> 3 branch.
fn v3_block(g: &mut GraphBuilder, prefix: &str, input: usize, c: usize) -> usize {
    let w = split_branches(c, 2);
    let a = g.conv1(format!("{prefix}.b0.conv1"), input, w[0]);
    let b = g.conv1(format!("{prefix}.b1.reduce"), input, w[1]);
    let b = g.conv3(format!("{prefix}.b1.conv3"), b, w[1]);
    g.concat(format!("{prefix}.cat"), vec![a, b], ConcatRole::Branches)
}

/// Four branches: 1; 1 -> 3; 1 -> 3 -> 3; average pool -> 1.
fn v4_block1(g: &mut GraphBuilder, prefix: &str, input: usize, c: usize) -> usize {
    let w = split_branches(c, 4);
    let b0 = g.conv1(format!("{prefix}.b0.conv1"), input, w[0]);
    let b1 = g.conv1(format!("{prefix}.b1.reduce"), input, w[1]);
    let b1 = g.conv3(format!("{prefix}.b1.conv3"), b1, w[1]);
    let b2 = g.conv1(format!("{prefix}.b2.reduce"), input, w[2]);
    let b2 = g.conv3(format!("{prefix}.b2.conv3a"), b2, w[2]);
    let b2 = g.conv3(format!("{prefix}.b2.conv3b"), b2, w[2]);
    let b3 = g.avg_pool_same(format!("{prefix}.b3.pool"), input, 3);
    let b3 = g.conv1(format!("{prefix}.b3.conv1"), b3, w[3]);
    g.concat(format!("{prefix}.cat"), vec![b0, b1, b2, b3], ConcatRole::Branches)
}

/// 1-kernel branch beside a factorized 1 -> 1x7 -> 7x1 branch (in 3D the
/// factors are 1x1x7 and 7x7x1).
fn v4_block2(g: &mut GraphBuilder, prefix: &str, input: usize, c: usize) -> usize {
    let w = split_branches(c, 2);
    let (k_a, k_b) = match g.rank() {
        Rank::Two => (vec![1, FACTORIZED_EXTENT], vec![FACTORIZED_EXTENT, 1]),
        Rank::Three => (
            vec![1, 1, FACTORIZED_EXTENT],
            vec![FACTORIZED_EXTENT, FACTORIZED_EXTENT, 1],
        ),
    };
    let a = g.conv1(format!("{prefix}.b0.conv1"), input, w[0]);
    let b = g.conv1(format!("{prefix}.b1.reduce"), input, w[1]);
    let b = g.conv(format!("{prefix}.b1.conv1x7"), b, k_a, w[1], true);
    let b = g.conv(format!("{prefix}.b1.conv7x1"), b, k_b, w[1], true);
    g.concat(format!("{prefix}.cat"), vec![a, b], ConcatRole::Branches)
}

type Block = fn(&mut GraphBuilder, &str, usize, usize) -> usize;

/// Shared skeleton: per-level block, hybrid pooling down, transposed
/// convolution up with skip concatenation.
fn build_inception(
    kind: ModelKind,
    rank: Rank,
    width_scale: usize,
    level_block: impl Fn(&mut GraphBuilder, &str, usize, usize, usize) -> usize,
) -> Result<NetworkSpec, ArchError> {
    let ch = level_channels(width_scale)?;
    let mut g = GraphBuilder::new(rank);
    let mut x = 0;
    let mut skips = Vec::new();
    for (l, &c) in ch.iter().enumerate() {
        if l > 0 {
            x = g.hybrid_pool(&format!("enc{l}.pool"), x);
        }
        x = level_block(&mut g, &format!("enc{l}"), l, x, c);
        skips.push(x);
    }
    let endpoint = x;
    x = g.dropout("bottleneck.dropout", x);

    g.set_stage(Stage::Decoder);
    for l in (0..ch.len() - 1).rev() {
        let up = g.up(format!("dec{l}.up"), x, ch[l]);
        let cat = g.concat(format!("dec{l}.skip"), vec![up, skips[l]], ConcatRole::Skip);
        x = level_block(&mut g, &format!("dec{l}"), l, cat, ch[l]);
    }
    g.head(x);
    Ok(g.finish(kind, width_scale, endpoint))
}

/// Inception-v3 style blocks with hybrid max/average pooling.
pub fn build_inception_v3(rank: Rank, width_scale: usize) -> Result<NetworkSpec, ArchError> {
    build_inception(ModelKind::InceptionV3, rank, width_scale, |g, p, _, x, c| {
        v3_block(g, p, x, c)
    })
}

/// Inception-v4 style: the four-branch block at every level, followed by the
/// factorized 7-kernel block at the two finest levels.
pub fn build_inception_v4(rank: Rank, width_scale: usize) -> Result<NetworkSpec, ArchError> {
    build_inception(ModelKind::InceptionV4, rank, width_scale, |g, p, l, x, c| {
        let blocks: &[(&str, Block)] = if l < FACTORIZED_LEVELS {
            &[("block1", v4_block1), ("block2", v4_block2)]
        } else {
            &[("block1", v4_block1)]
        };
        blocks
            .iter()
            .fold(x, |x, (name, block)| block(g, &format!("{p}.{name}"), x, c))
    })
}
