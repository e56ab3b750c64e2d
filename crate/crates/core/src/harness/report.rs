use std::fmt;

use crate::network::model::Network;
use crate::spectral_conv::mask_percentage;

/// Fraction of masked frequencies per conv layer.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskReport {
    Rows(Vec<(String, f64)>),
    /// The network was built with masks disabled.
    NoMasks,
}

pub fn report_masks(net: &Network) -> MaskReport {
    let convs = net.convs();
    if convs.is_empty() || convs.iter().all(|c| !c.layer.mask_trainable()) {
        return MaskReport::NoMasks;
    }
    MaskReport::Rows(
        convs
            .iter()
            .map(|c| (c.layer.name().to_string(), mask_percentage(c.layer.mask())))
            .collect(),
    )
}

impl fmt::Display for MaskReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskReport::Rows(rows) => {
                for (name, pct) in rows {
                    writeln!(f, "{name}, {pct:.4}")?;
                }
                Ok(())
            }
            MaskReport::NoMasks => writeln!(f, "no masks: this model was trained with spectral masks disabled"),
        }
    }
}
