use std::path::Path;

use super::{GatedViT, ViTConfig};
use crate::checkpoint::Container;
use crate::error::Result;
use crate::scalar::Scalar;

pub const VIT_TAG: &[u8; 4] = b"VIT1";

impl ViTConfig {
    pub(crate) fn write_meta(&self, c: &mut Container) {
        c.set("vit.layers", self.layers);
        c.set("vit.heads", self.heads);
        c.set("vit.dim", self.dim);
        c.set("vit.mlp_ratio", self.mlp_ratio);
        c.set("vit.num_classes", self.num_classes);
        c.set("vit.image_size", self.image_size);
        c.set("vit.patch_size", self.patch_size);
        c.set("vit.target_usage", self.target_usage);
        c.set("vit.budget_weight", self.budget_weight);
        c.set("vit.temperature", self.temperature);
        c.set("vit.gate_bias_init", self.gate_bias_init);
        c.set("vit.gate_bias_spread", self.gate_bias_spread);
    }

    pub(crate) fn read_meta(c: &Container) -> Result<Self> {
        Ok(Self {
            layers: c.meta_parse("vit.layers")?,
            heads: c.meta_parse("vit.heads")?,
            dim: c.meta_parse("vit.dim")?,
            mlp_ratio: c.meta_parse("vit.mlp_ratio")?,
            num_classes: c.meta_parse("vit.num_classes")?,
            image_size: c.meta_parse("vit.image_size")?,
            patch_size: c.meta_parse("vit.patch_size")?,
            target_usage: c.meta_parse("vit.target_usage")?,
            budget_weight: c.meta_parse("vit.budget_weight")?,
            temperature: c.meta_parse("vit.temperature")?,
            gate_bias_init: c.meta_parse("vit.gate_bias_init")?,
            gate_bias_spread: c.meta_parse("vit.gate_bias_spread")?,
        })
    }
}

impl<T: Scalar> GatedViT<T> {
    /// Packs config and parameters into a `VIT1` container.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(VIT_TAG);
        self.config.write_meta(&mut c);
        c.push_store(&self.store);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = ViTConfig::read_meta(c)?;
        let mut model = Self::zeroed(config)?;
        c.fill_store(&mut model.store)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes_tagged(bytes, VIT_TAG)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, VIT_TAG)?)
    }
}
