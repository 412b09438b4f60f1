//! Product → numeric feature row.
//!
//! A row is `one-hot categoricals ‖ z-scored numerics ‖ text embedding ‖
//! reduced image embedding`. The layout is fixed by the schema, the
//! provider dims and the reducer, and is identified by a fingerprint that
//! models check before predicting.

pub mod provider;
pub mod reducer;

use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, Product, Schema};
use crate::error::{Error, Result};
use crate::labeler::SalesClass;
use crate::util::fnv1a;

pub use provider::{BuiltinProvider, EmbeddingProvider, FileProvider, RemoteProvider};
pub use reducer::{fit_reducer, fit_reducer_with, AutoencoderOptions, Reducer, ReducerMethod};

pub const DEFAULT_REDUCED_DIM: usize = 64;

/// Indicators per (attribute, level) in schema order. An unseen level gives
/// an all-zero block for that attribute.
pub fn onehot_encode(product: &Product, schema: &Schema) -> Result<Vec<f64>> {
    let len: usize = schema.categoricals.values().map(|l| l.len()).sum();
    let mut out = Vec::with_capacity(len);
    for (name, levels) in &schema.categoricals {
        let value = product.categoricals.get(name).ok_or_else(|| {
            Error::invalid(format!("product {:?} lacks categorical attribute {name:?}", product.id))
        })?;
        out.extend(levels.iter().map(|l| if l == value { 1.0 } else { 0.0 }));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Onehot,
    Numeric,
    TextEmbed,
    ImageEmbedReduced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub segments: Vec<Segment>,
    /// `attribute=level` per one-hot column.
    pub onehot_columns: Vec<String>,
    pub numeric_columns: Vec<String>,
}

impl Layout {
    fn new(schema: &Schema, text_dim: usize, image_out: usize) -> Layout {
        let onehot_columns: Vec<String> = schema
            .categoricals
            .iter()
            .flat_map(|(n, levels)| levels.iter().map(move |l| format!("{n}={l}")))
            .collect();
        let numeric_columns: Vec<String> = schema.numerics.iter().cloned().collect();
        let mut segments = Vec::new();
        let mut offset = 0;
        for (kind, len) in [
            (SegmentKind::Onehot, onehot_columns.len()),
            (SegmentKind::Numeric, numeric_columns.len()),
            (SegmentKind::TextEmbed, text_dim),
            (SegmentKind::ImageEmbedReduced, image_out),
        ] {
            segments.push(Segment { kind, offset, len });
            offset += len;
        }
        Layout {
            segments,
            onehot_columns,
            numeric_columns,
        }
    }

    pub fn width(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len)
    }

    pub fn segment(&self, kind: SegmentKind) -> &Segment {
        self.segments
            .iter()
            .find(|s| s.kind == kind)
            .expect("every layout has all four segments")
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a(serde_json::to_string(self).expect("layout serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub values: Vec<f64>,
    pub layout_fingerprint: u64,
}

/// Per-attribute mean and standard deviation from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericScaler {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NumericScaler {
    pub fn fit(catalog: &Catalog) -> NumericScaler {
        let names: Vec<String> = catalog.schema().numerics.iter().cloned().collect();
        let n = catalog.len().max(1) as f64;
        let mut mean = Vec::with_capacity(names.len());
        let mut std = Vec::with_capacity(names.len());
        for name in &names {
            let vals: Vec<f64> = catalog.products().iter().map(|p| p.numerics[name]).collect();
            let m = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(var.sqrt());
        }
        NumericScaler { names, mean, std }
    }

    pub fn transform(&self, product: &Product) -> Result<Vec<f64>> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let v = product.numerics.get(name).ok_or_else(|| {
                    Error::invalid(format!("product {:?} lacks numeric attribute {name:?}", product.id))
                })?;
                Ok(if self.std[i] > 0.0 {
                    (v - self.mean[i]) / self.std[i]
                } else {
                    0.0
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeConfig {
    /// Reduced image dimension; 0 drops the image segment.
    pub reduced_dim: usize,
    pub reducer: ReducerMethod,
    pub autoencoder: AutoencoderOptions,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        EncodeConfig {
            reduced_dim: DEFAULT_REDUCED_DIM,
            reducer: ReducerMethod::Pca,
            autoencoder: AutoencoderOptions::default(),
        }
    }
}

/// Everything needed to turn a product into a row, fitted on a training
/// catalog. The provider itself is supplied at encode time and must match
/// the recorded fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub schema: Schema,
    pub scaler: NumericScaler,
    pub reducer: Option<Reducer>,
    pub provider_fingerprint: String,
    pub layout: Layout,
}

impl Encoder {
    pub fn fit(train: &Catalog, provider: &dyn EmbeddingProvider, config: &EncodeConfig) -> Result<Encoder> {
        if train.is_empty() {
            return Err(Error::empty("training catalog"));
        }
        let has_images = train.products().iter().any(|p| !p.image_ref.is_empty());
        if !has_images && config.reduced_dim > 0 {
            log::warn!("no training product has an image reference; image segment omitted");
        }
        let reducer = if config.reduced_dim == 0 || !has_images {
            None
        } else {
            let items: Vec<(&str, &str)> = train
                .products()
                .iter()
                .map(|p| (p.id.as_str(), p.image_ref.as_str()))
                .collect();
            let images = provider.embed_images(&items)?;
            Some(
                fit_reducer_with(&images, config.reduced_dim, config.reducer, &config.autoencoder)
                    .map_err(|e| Error::invalid(format!("image reducer: {e}")))?,
            )
        };
        let schema = train.schema().clone();
        let layout = Layout::new(
            &schema,
            provider.text_dim(),
            reducer.as_ref().map_or(0, |r| r.output_dim),
        );
        Ok(Encoder {
            scaler: NumericScaler::fit(train),
            schema,
            reducer,
            provider_fingerprint: provider.fingerprint(),
            layout,
        })
    }

    fn check_provider(&self, provider: &dyn EmbeddingProvider) -> Result<()> {
        if provider.fingerprint() != self.provider_fingerprint {
            return Err(Error::invalid(format!(
                "encoder was fitted with provider {:?}, got {:?}",
                self.provider_fingerprint,
                provider.fingerprint()
            )));
        }
        Ok(())
    }

    fn assemble(&self, product: &Product, text: &[f64], image: Option<&[f64]>) -> Result<FeatureRow> {
        let mut values = Vec::with_capacity(self.layout.width());
        values.extend(onehot_encode(product, &self.schema)?);
        values.extend(self.scaler.transform(product)?);
        if text.len() != self.layout.segment(SegmentKind::TextEmbed).len {
            return Err(Error::Dimension(format!(
                "text embedding of {:?} has {} dims, layout expects {}",
                product.id,
                text.len(),
                self.layout.segment(SegmentKind::TextEmbed).len
            )));
        }
        values.extend_from_slice(text);
        if let (Some(r), Some(img)) = (&self.reducer, image) {
            values.extend(r.transform(img)?);
        }
        debug_assert_eq!(values.len(), self.layout.width());
        Ok(FeatureRow {
            values,
            layout_fingerprint: self.layout.fingerprint(),
        })
    }

    pub fn encode_product(&self, provider: &dyn EmbeddingProvider, product: &Product) -> Result<FeatureRow> {
        self.encode_products(provider, std::slice::from_ref(product))
            .map(|mut v| v.remove(0))
    }

    /// Batch encode; providers see one text batch and one image batch.
    pub fn encode_products(&self, provider: &dyn EmbeddingProvider, products: &[Product]) -> Result<Vec<FeatureRow>> {
        self.check_provider(provider)?;
        let texts: Vec<(&str, &str)> = products.iter().map(|p| (p.id.as_str(), p.caption.as_str())).collect();
        let text_vecs = provider.embed_texts(&texts)?;
        let image_vecs = if self.reducer.is_some() {
            let imgs: Vec<(&str, &str)> = products.iter().map(|p| (p.id.as_str(), p.image_ref.as_str())).collect();
            Some(provider.embed_images(&imgs)?)
        } else {
            None
        };
        products
            .iter()
            .enumerate()
            .map(|(i, p)| {
                self.assemble(p, &text_vecs[i], image_vecs.as_ref().map(|v| v[i].as_slice()))
                    .map_err(|e| Error::invalid(format!("encoding product {:?}: {e}", p.id)))
            })
            .collect()
    }

    pub fn encode_catalog(
        &self,
        provider: &dyn EmbeddingProvider,
        catalog: &Catalog,
        labels: &[SalesClass],
    ) -> Result<EncodedDataset> {
        if labels.len() != catalog.len() {
            return Err(Error::Dimension(format!(
                "{} labels for {} products",
                labels.len(),
                catalog.len()
            )));
        }
        Ok(EncodedDataset {
            ids: catalog.products().iter().map(|p| p.id.clone()).collect(),
            rows: self.encode_products(provider, catalog.products())?,
            labels: labels.to_vec(),
            layout: self.layout.clone(),
            provider_fingerprint: self.provider_fingerprint.clone(),
            reducer: self.reducer.clone(),
        })
    }
}

/// Free-function form of [`Encoder::encode_product`].
pub fn assemble_row(product: &Product, provider: &dyn EmbeddingProvider, encoder: &Encoder) -> Result<FeatureRow> {
    encoder.encode_product(provider, product)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedDataset {
    pub ids: Vec<String>,
    pub rows: Vec<FeatureRow>,
    pub labels: Vec<SalesClass>,
    pub layout: Layout,
    pub provider_fingerprint: String,
    pub reducer: Option<Reducer>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ds: EncodedDataset = serde_json::from_str(s)?;
        if ds.rows.len() != ds.labels.len() || ds.rows.len() != ds.ids.len() {
            return Err(Error::Dimension("rows, labels and ids differ in length".into()));
        }
        let fp = ds.layout.fingerprint();
        if ds.rows.iter().any(|r| r.layout_fingerprint != fp || r.values.len() != ds.layout.width()) {
            return Err(Error::Dimension("row does not match dataset layout".into()));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn product(id: &str, caption: &str, colour: &str, price: f64, image: &str) -> Product {
        Product {
            id: id.into(),
            caption: caption.into(),
            image_ref: image.into(),
            sales: 1.0,
            categoricals: BTreeMap::from([("colour".into(), colour.into())]),
            numerics: BTreeMap::from([("price".into(), price)]),
        }
    }

    fn schema_three() -> Schema {
        Schema {
            categoricals: BTreeMap::from([(
                "colour".to_string(),
                BTreeSet::from(["blue".to_string(), "green".to_string(), "red".to_string()]),
            )]),
            numerics: BTreeSet::from(["price".to_string()]),
        }
    }

    #[test]
    fn onehot_indicator_and_unknown() {
        let s = schema_three();
        assert_eq!(onehot_encode(&product("a", "", "green", 1.0, ""), &s).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(onehot_encode(&product("a", "", "mauve", 1.0, ""), &s).unwrap(), vec![0.0, 0.0, 0.0]);
        let mut p = product("a", "", "red", 1.0, "");
        p.categoricals.clear();
        assert!(onehot_encode(&p, &s).is_err());
    }

    #[test]
    fn onehot_length_is_total_level_count() {
        let mut categoricals = BTreeMap::new();
        let mut manual = 0;
        for a in 0..22 {
            let levels: BTreeSet<String> = (0..(a % 5 + 2)).map(|l| format!("l{l}")).collect();
            manual += a % 5 + 2;
            categoricals.insert(format!("attr{a:02}"), levels);
        }
        let schema = Schema {
            categoricals,
            numerics: Default::default(),
        };
        let p = Product {
            id: "x".into(),
            caption: String::new(),
            image_ref: String::new(),
            sales: 0.0,
            categoricals: (0..22).map(|a| (format!("attr{a:02}"), "l1".to_string())).collect(),
            numerics: Default::default(),
        };
        let v = onehot_encode(&p, &schema).unwrap();
        assert_eq!(v.len(), manual);
        assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 22);
    }

    fn image_catalog(dir: &std::path::Path, n: usize) -> Catalog {
        let colours = ["red", "green", "blue"];
        let products: Vec<Product> = (0..n)
            .map(|i| {
                let img = format!("img{i}.bin");
                std::fs::write(dir.join(&img), format!("pixels {i} {}", colours[i % 3]).repeat(3)).unwrap();
                product(&format!("p{i}"), &format!("feature {}, other {}", i % 4, i % 7), colours[i % 3], 10.0 + i as f64, &img)
            })
            .collect();
        Catalog::new(products).unwrap()
    }

    #[test]
    fn layout_and_row_width() {
        let dir = tempfile::tempdir().unwrap();
        let cat = image_catalog(dir.path(), 20);
        let provider = BuiltinProvider::new(dir.path());
        let cfg = EncodeConfig { reduced_dim: 4, ..Default::default() };
        let enc = Encoder::fit(&cat, &provider, &cfg).unwrap();
        assert_eq!(enc.layout.width(), 3 + 1 + 512 + 4);
        let row = enc.encode_product(&provider, &cat.products()[0]).unwrap();
        assert_eq!(row.values.len(), enc.layout.width());
        let segs = &enc.layout.segments;
        for w in segs.windows(2) {
            assert_eq!(w[0].offset + w[0].len, w[1].offset);
        }
    }

    #[test]
    fn empty_caption_gives_zero_text_segment() {
        let dir = tempfile::tempdir().unwrap();
        let cat = image_catalog(dir.path(), 12);
        let provider = BuiltinProvider::new(dir.path());
        let enc = Encoder::fit(&cat, &provider, &EncodeConfig { reduced_dim: 2, ..Default::default() }).unwrap();
        let mut p = cat.products()[0].clone();
        p.caption.clear();
        let row = enc.encode_product(&provider, &p).unwrap();
        let seg = enc.layout.segment(SegmentKind::TextEmbed);
        assert!(row.values[seg.offset..seg.offset + seg.len].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn image_change_touches_only_image_segment() {
        let dir = tempfile::tempdir().unwrap();
        let cat = image_catalog(dir.path(), 15);
        let provider = BuiltinProvider::new(dir.path());
        let enc = Encoder::fit(&cat, &provider, &EncodeConfig { reduced_dim: 3, ..Default::default() }).unwrap();
        let p = cat.products()[1].clone();
        let before = enc.encode_product(&provider, &p).unwrap();
        std::fs::write(dir.path().join("edited.bin"), b"completely different pixels").unwrap();
        let mut q = p.clone();
        q.image_ref = "edited.bin".into();
        let after = enc.encode_product(&provider, &q).unwrap();
        let img = enc.layout.segment(SegmentKind::ImageEmbedReduced);
        for i in 0..enc.layout.width() {
            let in_image = (img.offset..img.offset + img.len).contains(&i);
            if !in_image {
                assert_eq!(before.values[i], after.values[i], "column {i}");
            }
        }
        assert_ne!(before.values[img.offset..], after.values[img.offset..]);
    }

    #[test]
    fn dataset_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cat = image_catalog(dir.path(), 12);
        let provider = BuiltinProvider::new(dir.path());
        let enc = Encoder::fit(&cat, &provider, &EncodeConfig { reduced_dim: 3, ..Default::default() }).unwrap();
        let labels: Vec<SalesClass> = (0..12).map(|i| SalesClass::from_index(i % 3)).collect();
        let ds = enc.encode_catalog(&provider, &cat, &labels).unwrap();
        let back = EncodedDataset::from_json(&ds.to_json()).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.rows.iter().zip(&ds.rows) {
            assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn provider_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cat = image_catalog(dir.path(), 6);
        let provider = BuiltinProvider::new(dir.path());
        let mut enc = Encoder::fit(&cat, &provider, &EncodeConfig { reduced_dim: 0, ..Default::default() }).unwrap();
        enc.provider_fingerprint = "file:abc".into();
        assert!(enc.encode_product(&provider, &cat.products()[0]).is_err());
    }

    #[test]
    fn numerics_are_z_scored() {
        let dir = tempfile::tempdir().unwrap();
        let cat = image_catalog(dir.path(), 9);
        let scaler = NumericScaler::fit(&cat);
        let zs: Vec<f64> = cat.products().iter().map(|p| scaler.transform(p).unwrap()[0]).collect();
        let mean = zs.iter().sum::<f64>() / zs.len() as f64;
        let var = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / zs.len() as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}
