//! Ready-made architectures.
//!
//! Every builder sets each layer's transposed activation to the activation
//! that follows the layer's input in the forward pass, and the first layer's
//! to a sigmoid, so the transposed model emits images in `[0, 1]`.

use crate::kernels::{Activation, PoolKind};
use crate::layers::{LayerKind, LayerSpec};

/// Shifts forward activations one layer down to serve as transposed activations.
pub fn with_mirrored_activations(mut specs: Vec<LayerSpec>) -> Vec<LayerSpec> {
    let forward: Vec<Activation> = specs.iter().map(|s| s.activation).collect();
    for (i, s) in specs.iter_mut().enumerate() {
        s.transpose_activation = Some(if i == 0 { Activation::Sigmoid } else { forward[i - 1] });
    }
    specs
}

/// Flatten, `depth` ReLU layers of `width`, linear head.
pub fn fc(image: &[usize], width: usize, depth: usize, classes: usize) -> Vec<LayerSpec> {
    let input: usize = image.iter().product();
    let mut specs = vec![LayerSpec::reshape(image.to_vec(), vec![input])];
    let mut prev = input;
    for _ in 0..depth {
        specs.push(LayerSpec::linear(prev, width, Activation::Relu));
        prev = width;
    }
    specs.push(LayerSpec::linear(prev, classes, Activation::Identity));
    with_mirrored_activations(specs)
}

/// `layers` blocks of 3×3 convolution (ReLU) followed by 2×2 max pooling on
/// all but the last block, then a linear head.
pub fn cnn(image: &[usize], channels: usize, layers: usize, classes: usize) -> Vec<LayerSpec> {
    let (mut c, mut h, mut w) = (image[0], image[1], image[2]);
    let mut specs = Vec::new();
    for i in 0..layers {
        specs.push(LayerSpec::conv(c, channels, 3, 1, 1, Activation::Relu));
        c = channels;
        if i + 1 < layers {
            specs.push(LayerSpec::pool(PoolKind::Max, 2));
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
    }
    specs.push(LayerSpec::reshape(vec![c, h, w], vec![c * h * w]));
    specs.push(LayerSpec::linear(c * h * w, classes, Activation::Identity));
    with_mirrored_activations(specs)
}

/// Patch embedding, positional table, `blocks` pre-norm transformer blocks,
/// mean pooling over tokens and a linear head.
pub fn vit(image: &[usize], patch: usize, dim: usize, heads: usize, blocks: usize, classes: usize) -> Vec<LayerSpec> {
    let (c, h, w) = (image[0], image[1], image[2]);
    let tokens = (h / patch) * (w / patch);
    let mut specs = vec![
        LayerSpec::new(LayerKind::Patchify { patch }, Activation::Identity),
        LayerSpec::linear(c * patch * patch, dim, Activation::Identity),
        LayerSpec::new(LayerKind::PositionalEncoding { tokens, dim }, Activation::Identity),
    ];
    for _ in 0..blocks {
        specs.push(LayerSpec::new(
            LayerKind::TransformerBlock {
                dim,
                heads,
                mlp_dim: 3 * dim,
            },
            Activation::Identity,
        ));
    }
    specs.push(LayerSpec::new(LayerKind::TokenPool { tokens }, Activation::Identity));
    specs.push(LayerSpec::linear(dim, classes, Activation::Identity));
    with_mirrored_activations(specs)
}

/// The architectures used to check transposition invariants.
pub fn test_zoo() -> Vec<(&'static str, Vec<LayerSpec>, Vec<usize>)> {
    let mnist = vec![1, 28, 28];
    vec![
        ("fc-1x128", fc(&mnist, 128, 1, 10), mnist.clone()),
        ("fc-2x256", fc(&mnist, 256, 2, 10), mnist.clone()),
        ("fc-3x512", fc(&mnist, 512, 3, 10), mnist.clone()),
        ("cnn-2x8", cnn(&mnist, 8, 2, 10), mnist.clone()),
        ("cnn-3x16", cnn(&mnist, 16, 3, 10), mnist.clone()),
        ("vit-4x4", vit(&mnist, 7, 32, 4, 2, 10), mnist),
    ]
}
