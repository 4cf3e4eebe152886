//! Encoder, decoder and latent statistics bundled for inference.

use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::LatentStatistics;

/// Images per forward pass when super-resolving long lists.
const CHUNK: usize = 16;

#[derive(Clone, Debug)]
pub struct Model {
    pub decoder: Decoder,
    pub encoder: Encoder,
    pub stats: LatentStatistics,
}

impl Model {
    pub fn new(decoder: Decoder, encoder: Encoder, stats: LatentStatistics) -> Result<Self> {
        if encoder.l != decoder.l() || encoder.d_w != decoder.d_w() {
            return Err(Error::Pairing(format!(
                "encoder predicts {}x{} codes, decoder takes {}x{}",
                encoder.l,
                encoder.d_w,
                decoder.l(),
                decoder.d_w()
            )));
        }
        Ok(Self {
            decoder,
            encoder,
            stats,
        })
    }

    /// Ratio between decoder output and encoder input sizes.
    pub fn factor(&self) -> usize {
        self.decoder.config.output_size() / self.encoder.config.lr_size
    }

    /// Deterministic `G(E(lr))` for every input.
    pub fn super_resolve_batch(&self, lrs: &[Image]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(lrs.len());
        for chunk in lrs.chunks(CHUNK) {
            let ws = self.encoder.encode_batch(chunk, &self.stats)?;
            out.extend(self.decoder.synthesize_batch(&ws)?);
        }
        Ok(out)
    }

    pub fn super_resolve(&self, lr: &Image) -> Result<Image> {
        Ok(self.super_resolve_batch(std::slice::from_ref(lr))?.remove(0))
    }
}
