use alloc::sync::Arc;
use alloc::vec::Vec;

use super::lowering::{lower_conv_to_matmul, ConvLowering, LoweredMatrix};
use super::{ActivationKind, Layer, NetworkDescription};
use crate::crossbar::{CrossbarTile, SenseChain, TileLimits};
use crate::device::DeviceConfig;
use crate::error::{config_err, shape_err, Result};
use crate::rng::StreamKey;

/// Partition of a lowered `rows x cols` matrix into tiles.
///
/// Tiles are stored row-block major. Tiles in the same column block cover
/// disjoint input rows; their held currents are summed before comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub rows: usize,
    pub cols: usize,
    pub row_blocks: Vec<(usize, usize)>,
    pub col_blocks: Vec<(usize, usize)>,
}

fn blocks(n: usize, max: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(max)).map(|b| (b * max, ((b + 1) * max).min(n))).collect()
}

impl TilePlan {
    pub fn new(rows: usize, cols: usize, limits: TileLimits) -> Result<Self> {
        if limits.max_rows == 0 || limits.max_cols == 0 {
            return Err(config_err!("tile limits must be nonzero"));
        }
        if rows == 0 || cols == 0 {
            return Err(shape_err!("cannot tile an empty {}x{} matrix", rows, cols));
        }
        Ok(TilePlan {
            rows,
            cols,
            row_blocks: blocks(rows, limits.max_rows),
            col_blocks: blocks(cols, limits.max_cols),
        })
    }

    pub fn tile_count(&self) -> usize {
        self.row_blocks.len() * self.col_blocks.len()
    }

    /// Position of tile `(row_block, col_block)` in the tile list.
    pub fn tile_index(&self, row_block: usize, col_block: usize) -> usize {
        row_block * self.col_blocks.len() + col_block
    }
}

/// One conv or dense layer programmed onto tiles.
#[derive(Debug, Clone)]
pub struct MappedLayer {
    /// Index into `NetworkDescription::layers`.
    pub layer_index: usize,
    pub plan: TilePlan,
    pub tiles: Vec<CrossbarTile>,
    pub chain: SenseChain,
    /// `Some` for conv layers.
    pub conv: Option<ConvLowering>,
    pub activation: ActivationKind,
}

/// A network instance: every weight drawn once from the D2D distribution.
#[derive(Debug, Clone)]
pub struct MappedNetwork {
    pub layers: Vec<MappedLayer>,
    pub config: Arc<DeviceConfig>,
    pub seed: u64,
    pub limits: TileLimits,
}

impl MappedNetwork {
    pub fn tile_count(&self) -> usize {
        self.layers.iter().map(|l| l.tiles.len()).sum()
    }

    pub fn tiles(&self) -> impl Iterator<Item = &CrossbarTile> {
        self.layers.iter().flat_map(|l| l.tiles.iter())
    }

    /// Cells whose D2D draw hit the conductance floor.
    pub fn clamped_cells(&self) -> usize {
        self.tiles().map(CrossbarTile::clamped_cells).sum()
    }
}

/// Lower, tile and program every parametric layer. D2D draws are keyed by
/// `seed`; tiles get consecutive array ids in layer order.
pub fn map_network_to_tiles(
    net: &NetworkDescription,
    config: &DeviceConfig,
    limits: TileLimits,
    seed: u64,
) -> Result<MappedNetwork> {
    net.validate(true)?;
    config.validate(net.precision)?;
    let config = Arc::new(config.clone());
    let key = StreamKey::device(seed);
    let shapes = net.shapes()?;
    let base_chain = SenseChain::calibrated(&config)?;
    let mut array_id = 0u32;
    let mut layers = Vec::new();
    for i in net.parametric_layers() {
        let layer = &net.layers[i];
        let weights = layer
            .weights()
            .ok_or_else(|| config_err!("layer {}: missing trained weights", i))?;
        let matrix = LoweredMatrix::from_output_major(weights)?;
        let conv = match *layer {
            Layer::Conv2d {
                out_channels,
                kernel,
                stride,
                ..
            } => Some(lower_conv_to_matmul(out_channels, kernel, stride, shapes[i])?),
            _ => None,
        };
        let activation = match net.layers[i + 1] {
            Layer::Activation(a) => a,
            _ => unreachable!("validated: parametric layers are followed by an activation"),
        };
        let chain = match activation {
            ActivationKind::Sigmoid { scale } => SenseChain {
                output_scale: scale,
                ..base_chain
            },
            _ => base_chain,
        };
        let plan = TilePlan::new(matrix.rows, matrix.cols, limits)?;
        let mut tiles = Vec::with_capacity(plan.tile_count());
        for &(lo, hi) in &plan.row_blocks {
            for &(clo, chi) in &plan.col_blocks {
                let block = matrix.block(lo, hi, clo, chi);
                tiles.push(CrossbarTile::program(
                    &block,
                    hi - lo,
                    chi - clo,
                    config.clone(),
                    array_id,
                    &key,
                    limits,
                )?);
                array_id += 1;
            }
        }
        layers.push(MappedLayer {
            layer_index: i,
            plan,
            tiles,
            chain,
            conv,
            activation,
        });
    }
    let clamped: usize = layers.iter().flat_map(|l| &l.tiles).map(|t| t.clamped_cells()).sum();
    if clamped > 0 {
        log::warn!("{} cells clamped at the conductance floor while mapping", clamped);
    }
    Ok(MappedNetwork {
        layers,
        config,
        seed,
        limits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::Precision;

    #[test]
    fn ceiling_division_blocks() {
        let p = TilePlan::new(200, 6, TileLimits::default()).unwrap();
        assert_eq!(p.row_blocks, [(0, 64), (64, 128), (128, 192), (192, 200)]);
        assert_eq!(p.col_blocks, [(0, 6)]);
        assert_eq!(p.tile_count(), 4);
        let small = TilePlan::new(10, 10, TileLimits::default()).unwrap();
        assert_eq!(small.tile_count(), 1);
        let exact = TilePlan::new(128, 64, TileLimits::default()).unwrap();
        assert_eq!(exact.row_blocks.len(), 2);
        assert!(TilePlan::new(4, 4, TileLimits { max_rows: 0, max_cols: 4 }).is_err());
    }

    #[test]
    fn lenet_mapping() {
        let mut net = NetworkDescription::lenet(Precision::Ternary);
        let cfg = DeviceConfig::hrs_default();
        assert!(matches!(
            map_network_to_tiles(&net, &cfg, TileLimits::default(), 1),
            Err(crate::Error::Config(_))
        ));
        super::super::tests::random_weights(&mut net, 2);
        let m = map_network_to_tiles(&net, &cfg, TileLimits::default(), 1).unwrap();
        let counts: Vec<usize> = m.layers.iter().map(|l| l.tiles.len()).collect();
        // 200x6, 150x16, 400x120, 120x84, 84x10
        assert_eq!(counts, [4, 3, 7 * 2, 2 * 2, 2]);
        let ids: Vec<u32> = m.tiles().map(CrossbarTile::array_id).collect();
        assert_eq!(ids, (0..ids.len() as u32).collect::<Vec<_>>());
        let again = map_network_to_tiles(&net, &cfg, TileLimits::default(), 1).unwrap();
        for (a, b) in m.tiles().zip(again.tiles()) {
            assert_eq!(a.cell_g(), b.cell_g());
        }
        let other = map_network_to_tiles(&net, &cfg, TileLimits::default(), 2).unwrap();
        assert_ne!(m.layers[0].tiles[0].cell_g(), other.layers[0].tiles[0].cell_g());
    }

    #[test]
    fn binary_only_config_rejected_for_ternary_net() {
        let mut net = NetworkDescription::lenet(Precision::Ternary);
        super::super::tests::random_weights(&mut net, 2);
        let mut cfg = DeviceConfig::hrs_default();
        cfg.states[1] = None;
        assert!(map_network_to_tiles(&net, &cfg, TileLimits::default(), 1).is_err());
    }
}
