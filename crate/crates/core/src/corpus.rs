//! Product catalogs: records, schema inference, JSONL/CSV I/O, min-max
//! normalization and seeded train/test splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One catalog item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: String,
    pub caption: String,
    pub image_ref: String,
    pub sales: f64,
    pub categoricals: BTreeMap<String, String>,
    pub numerics: BTreeMap<String, f64>,
}

/// Declared attributes of a catalog: categorical names with their level
/// sets, plus numeric attribute names. Inferred from the data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub categoricals: BTreeMap<String, BTreeSet<String>>,
    pub numerics: BTreeSet<String>,
}

impl Schema {
    /// Infer from products. Attribute names come from the first product;
    /// every other product must carry exactly the same names.
    pub fn infer(products: &[Product]) -> Result<Schema> {
        let Some(first) = products.first() else {
            return Ok(Schema::default());
        };
        let mut schema = Schema {
            categoricals: first
                .categoricals
                .keys()
                .map(|k| (k.clone(), BTreeSet::new()))
                .collect(),
            numerics: first.numerics.keys().cloned().collect(),
        };
        for (i, p) in products.iter().enumerate() {
            let record = i + 1;
            for name in schema.categoricals.keys() {
                if !p.categoricals.contains_key(name) {
                    return Err(Error::MissingField {
                        field: format!("categoricals.{name}"),
                        record,
                    });
                }
            }
            for name in &schema.numerics {
                if !p.numerics.contains_key(name) {
                    return Err(Error::MissingField {
                        field: format!("numerics.{name}"),
                        record,
                    });
                }
            }
            if let Some(extra) = p
                .categoricals
                .keys()
                .find(|k| !schema.categoricals.contains_key(*k))
                .or_else(|| p.numerics.keys().find(|k| !schema.numerics.contains(*k)))
            {
                return Err(Error::invalid(format!(
                    "record {record}: attribute {extra:?} not declared by the first record"
                )));
            }
            for (name, value) in &p.categoricals {
                schema
                    .categoricals
                    .get_mut(name)
                    .expect("checked above")
                    .insert(value.clone());
            }
        }
        Ok(schema)
    }

    /// Check that a product uses only declared attributes and levels.
    pub fn conforms(&self, p: &Product) -> bool {
        p.categoricals.len() == self.categoricals.len()
            && p.numerics.len() == self.numerics.len()
            && p.categoricals.iter().all(|(k, v)| {
                self.categoricals
                    .get(k)
                    .is_some_and(|levels| levels.contains(v))
            })
            && p.numerics.keys().all(|k| self.numerics.contains(k))
    }
}

/// An ordered, validated list of products plus its schema. Immutable once
/// built.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    products: Vec<Product>,
    schema: Schema,
}

impl Catalog {
    /// Validate products (unique non-empty ids, finite non-negative sales)
    /// and infer the schema.
    pub fn new(products: Vec<Product>) -> Result<Catalog> {
        validate_products(&products)?;
        let schema = Schema::infer(&products)?;
        Ok(Catalog { products, schema })
    }

    /// Build with an explicit schema; every product must conform.
    pub fn with_schema(products: Vec<Product>, schema: Schema) -> Result<Catalog> {
        validate_products(&products)?;
        if let Some(p) = products.iter().find(|p| !schema.conforms(p)) {
            return Err(Error::invalid(format!(
                "product {:?} does not conform to the catalog schema",
                p.id
            )));
        }
        Ok(Catalog { products, schema })
    }

    pub fn products(&self) -> &[Product] {
        &self.products
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn sales(&self) -> Vec<f64> {
        self.products.iter().map(|p| p.sales).collect()
    }

    pub fn index_by_id(&self) -> HashMap<&str, &Product> {
        self.products.iter().map(|p| (p.id.as_str(), p)).collect()
    }

    pub fn into_products(self) -> Vec<Product> {
        self.products
    }

    /// Canonical JSONL serialization, one product per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.products {
            out.push_str(&serde_json::to_string(p).expect("product serializes"));
            out.push('\n');
        }
        out
    }

    /// CSV with fixed columns followed by `cat:<name>` and `num:<name>`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "id".to_string(),
            "caption".to_string(),
            "image_ref".to_string(),
            "sales".to_string(),
        ];
        header.extend(self.schema.categoricals.keys().map(|k| format!("cat:{k}")));
        header.extend(self.schema.numerics.iter().map(|k| format!("num:{k}")));
        w.write_record(&header)?;
        for p in &self.products {
            let mut row = vec![
                p.id.clone(),
                p.caption.clone(),
                p.image_ref.clone(),
                p.sales.to_string(),
            ];
            row.extend(self.schema.categoricals.keys().map(|k| p.categoricals[k].clone()));
            row.extend(self.schema.numerics.iter().map(|k| p.numerics[k].to_string()));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn validate_products(products: &[Product]) -> Result<()> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, p) in products.iter().enumerate() {
        let record = i + 1;
        if p.id.is_empty() {
            return Err(Error::MissingField {
                field: "id".into(),
                record,
            });
        }
        if let Some(&first) = seen.get(p.id.as_str()) {
            return Err(Error::DuplicateId {
                id: p.id.clone(),
                first,
                second: record,
            });
        }
        seen.insert(&p.id, record);
        if !p.sales.is_finite() || p.sales < 0.0 {
            return Err(Error::NegativeSales {
                id: p.id.clone(),
                sales: p.sales,
            });
        }
        if let Some((k, _)) = p.numerics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "product {:?}: numeric attribute {k:?} is not finite",
                p.id
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CatalogFormat {
    Jsonl,
    Csv,
}

impl CatalogFormat {
    /// Guess from the file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> CatalogFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CatalogFormat::Csv,
            _ => CatalogFormat::Jsonl,
        }
    }
}

pub fn load_catalog(path: &Path, format: CatalogFormat) -> Result<Catalog> {
    let file = std::fs::File::open(path)?;
    let name = path.display().to_string();
    match format {
        CatalogFormat::Jsonl => parse_jsonl(file, &name),
        CatalogFormat::Csv => parse_csv(file, &name),
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    caption: Option<String>,
    #[serde(default)]
    image_ref: String,
    sales: Option<f64>,
    #[serde(default)]
    categoricals: BTreeMap<String, String>,
    #[serde(default)]
    numerics: BTreeMap<String, f64>,
}

/// Parse JSONL. Blank lines are skipped; record numbers are line numbers.
pub fn parse_jsonl<R: Read>(reader: R, name: &str) -> Result<Catalog> {
    let mut products = Vec::new();
    let mut lines_of = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let record = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: name.to_string(),
            record,
            message: e.to_string(),
        })?;
        let missing = |field: &str| Error::MissingField {
            field: field.to_string(),
            record,
        };
        products.push(Product {
            id: raw.id.ok_or_else(|| missing("id"))?,
            caption: raw.caption.ok_or_else(|| missing("caption"))?,
            image_ref: raw.image_ref,
            sales: raw.sales.ok_or_else(|| missing("sales"))?,
            categoricals: raw.categoricals,
            numerics: raw.numerics,
        });
        lines_of.push(record);
    }
    Catalog::new(products).map_err(|e| renumber(e, &lines_of))
}

/// Parse CSV with columns id, caption, image_ref, sales, then `cat:<name>`
/// and `num:<name>` columns in any order.
pub fn parse_csv<R: Read>(reader: R, name: &str) -> Result<Catalog> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |field: &str| headers.iter().position(|h| h == field);
    let id_col = col("id").ok_or_else(|| Error::MissingField {
        field: "id".into(),
        record: 1,
    })?;
    let caption_col = col("caption").ok_or_else(|| Error::MissingField {
        field: "caption".into(),
        record: 1,
    })?;
    let sales_col = col("sales").ok_or_else(|| Error::MissingField {
        field: "sales".into(),
        record: 1,
    })?;
    let image_col = col("image_ref");
    let mut cat_cols = Vec::new();
    let mut num_cols = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if let Some(n) = h.strip_prefix("cat:") {
            cat_cols.push((i, n.to_string()));
        } else if let Some(n) = h.strip_prefix("num:") {
            num_cols.push((i, n.to_string()));
        }
    }

    let mut products = Vec::new();
    let mut lines_of = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // header is line 1
        let record = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            path: name.to_string(),
            record,
            message: e.to_string(),
        })?;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let parse_num = |field: &str, s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Parse {
                path: name.to_string(),
                record,
                message: format!("field {field:?}: {e}"),
            })
        };
        let sales_raw = get(sales_col);
        if sales_raw.is_empty() {
            return Err(Error::MissingField {
                field: "sales".into(),
                record,
            });
        }
        let mut categoricals = BTreeMap::new();
        for (c, n) in &cat_cols {
            categoricals.insert(n.clone(), get(*c).to_string());
        }
        let mut numerics = BTreeMap::new();
        for (c, n) in &num_cols {
            numerics.insert(n.clone(), parse_num(n, get(*c))?);
        }
        products.push(Product {
            id: get(id_col).to_string(),
            caption: get(caption_col).to_string(),
            image_ref: image_col.map(get).unwrap_or("").to_string(),
            sales: parse_num("sales", sales_raw)?,
            categoricals,
            numerics,
        });
        lines_of.push(record);
    }
    Catalog::new(products).map_err(|e| renumber(e, &lines_of))
}

/// Validation reports 1-based product positions; map them to file lines.
fn renumber(e: Error, lines_of: &[usize]) -> Error {
    let line = |r: usize| lines_of.get(r - 1).copied().unwrap_or(r);
    match e {
        Error::DuplicateId { id, first, second } => Error::DuplicateId {
            id,
            first: line(first),
            second: line(second),
        },
        Error::MissingField { field, record } => Error::MissingField {
            field,
            record: line(record),
        },
        other => other,
    }
}

/// A value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizedValue(f64);

impl NormalizedValue {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(NormalizedValue(value))
        } else {
            Err(Error::invalid(format!("{value} is outside [0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Min and max of a value list; maps values with `(v - min) / (max - min)`,
/// or to 0 when the range is degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: &[f64]) -> Result<MinMax> {
        if values.is_empty() {
            return Err(Error::empty("min-max normalization needs at least one value"));
        }
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Ok(MinMax { min, max })
    }

    /// Values outside the fitted range are clamped.
    pub fn apply(&self, v: f64) -> NormalizedValue {
        if self.max == self.min {
            return NormalizedValue(0.0);
        }
        NormalizedValue(((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0))
    }
}

pub fn minmax_normalize(values: &[f64]) -> Result<Vec<NormalizedValue>> {
    let mm = MinMax::fit(values)?;
    Ok(values.iter().map(|&v| mm.apply(v)).collect())
}

/// Seeded random partition into train and test. The train side gets
/// `round(train_fraction * n)` products; both sides keep catalog order.
pub fn split(catalog: &Catalog, train_fraction: f64, seed: u64) -> Result<(Catalog, Catalog)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let n = catalog.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (p, t) in catalog.products.iter().zip(in_train) {
        if t {
            train.push(p.clone());
        } else {
            test.push(p.clone());
        }
    }
    Ok((
        Catalog {
            products: train,
            schema: catalog.schema.clone(),
        },
        Catalog {
            products: test,
            schema: catalog.schema.clone(),
        },
    ))
}
