//! Causal convolution masks.
//!
//! Mask A excludes the current position (first layer); mask B includes it
//! (later layers). Both admit the full rows above the center and the
//! columns left of it. At the center, channel groups enforce the R -> G -> B
//! intra-pixel order: with mask A, output group g sees input groups < g;
//! with mask B, groups <= g. Context channels (conditioning features)
//! carry no causal constraint and are visible at every tap.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskType {
    A,
    B,
}

/// Causal role of one input channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputRole {
    /// Part of the generated image, belonging to a channel-order group.
    Causal(usize),
    /// External context; visible everywhere.
    Context,
}

/// Block assignment of `channels` hidden channels into `groups` groups.
pub fn block_groups(channels: usize, groups: usize) -> Vec<usize> {
    assert!(
        channels.is_multiple_of(groups),
        "channels must divide into groups"
    );
    let per = channels / groups;
    (0..channels).map(|c| c / per).collect()
}

/// Binary mask of shape [cout, cin, k, k].
pub fn build_mask(
    mask_type: MaskType,
    out_groups: &[usize],
    in_roles: &[InputRole],
    k: usize,
) -> Tensor {
    let (cout, cin) = (out_groups.len(), in_roles.len());
    let center = (k - 1) / 2;
    let mut m = Tensor::zeros(vec![cout, cin, k, k]);
    for (o, &og) in out_groups.iter().enumerate() {
        for (i, &role) in in_roles.iter().enumerate() {
            for kr in 0..k {
                for kc in 0..k {
                    let allowed = match role {
                        InputRole::Context => true,
                        InputRole::Causal(ig) => {
                            if kr < center {
                                true
                            } else if kr > center || kc > center {
                                false
                            } else if kc < center {
                                true
                            } else {
                                match mask_type {
                                    MaskType::A => ig < og,
                                    MaskType::B => ig <= og,
                                }
                            }
                        }
                    };
                    if allowed {
                        let idx = ((o * cin + i) * k + kr) * k + kc;
                        m.data_mut()[idx] = 1.0;
                    }
                }
            }
        }
    }
    m
}
