//! Parameter and FLOP accounting.
//!
//! Parameter counts are exact (biases included). FLOPs count
//! multiply-accumulates only — bias additions and activation functions are
//! ignored, so a k x k conv producing `c_out x h x w` from `c_in` channels
//! costs `c_out * c_in * k * k * h * w`.

use super::DetectorConfig;

/// Cost of one named weight set, with FLOPs summed over every place the
/// weights are applied (shared heads run once per pyramid level).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerUse {
    pub name: String,
    pub params: usize,
    pub flops: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Complexity {
    pub params: usize,
    pub flops: usize,
}

impl Complexity {
    /// Sums a layer listing; an empty listing costs nothing.
    pub fn total(layers: &[LayerUse]) -> Complexity {
        layers.iter().fold(Complexity::default(), |acc, l| Complexity {
            params: acc.params + l.params,
            flops: acc.flops + l.flops,
        })
    }
}

/// Parameters and MACs of a conv layer run once at the given output size.
pub fn conv_cost(c_in: usize, c_out: usize, kernel: usize, out_h: usize, out_w: usize) -> Complexity {
    let weights = c_out * c_in * kernel * kernel;
    Complexity { params: weights + c_out, flops: weights * out_h * out_w }
}

/// Parameters and MACs of a fully connected layer.
pub fn linear_cost(in_features: usize, out_features: usize) -> Complexity {
    Complexity { params: in_features * out_features + out_features, flops: in_features * out_features }
}

/// Per-layer cost breakdown in [`named_params`](super::DetectorModel::named_params) order.
pub fn layer_stack(config: &DetectorConfig) -> Vec<LayerUse> {
    let mut layers = Vec::new();
    let mut c_prev = 1;
    let (mut h, mut w) = (config.input_height, config.input_width);
    for (i, &width) in config.backbone_widths.iter().enumerate() {
        let c = conv_cost(c_prev, width, 3, h, w);
        layers.push(LayerUse { name: format!("backbone.{i}"), params: c.params, flops: c.flops });
        c_prev = width;
        h /= 2;
        w /= 2;
    }
    let shapes = config.level_shapes();
    let deep = *config.backbone_widths.last().unwrap_or(&0);
    for (l, &(lh, lw)) in shapes.iter().enumerate() {
        let c = conv_cost(deep, config.neck_channels, 1, lh, lw);
        layers.push(LayerUse { name: format!("lateral.{l}"), params: c.params, flops: c.flops });
    }
    for (l, &(lh, lw)) in shapes.iter().enumerate() {
        let c = conv_cost(config.neck_channels, config.neck_channels, 3, lh, lw);
        layers.push(LayerUse { name: format!("neck_out.{l}"), params: c.params, flops: c.flops });
    }
    for (name, c_out) in [("head.cls", config.num_classes), ("head.box", 4)] {
        let mut params = 0;
        let mut flops = 0;
        for &(lh, lw) in &shapes {
            let c = conv_cost(config.neck_channels, c_out, 3, lh, lw);
            params = c.params; // shared weights: count once
            flops += c.flops;
        }
        layers.push(LayerUse { name: name.to_string(), params, flops });
    }
    layers
}

/// Total parameter and FLOP cost of one forward pass.
pub fn count_complexity(config: &DetectorConfig) -> Complexity {
    Complexity::total(&layer_stack(config))
}
