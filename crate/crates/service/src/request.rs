//! Field-by-field decoding of JSON request bodies so that every rejection
//! can name the offending field.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use scalae_core::dataset::Grid;
use scalae_core::imagery::ImageTile;
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::ApiError;

pub(crate) struct Fields {
    map: Map<String, Value>,
}

impl Fields {
    /// Parses a JSON object and rejects keys outside `allowed`.
    pub fn parse(body: &[u8], allowed: &[&str]) -> Result<Self, ApiError> {
        let value: Value = serde_json::from_slice(body).map_err(|e| ApiError::bad_request(None, format!("malformed JSON: {e}")))?;
        let Value::Object(map) = value else {
            return Err(ApiError::bad_request(None, "request body must be a JSON object"));
        };
        if let Some(extra) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(ApiError::bad_request(Some(extra), format!("unexpected field `{extra}`")));
        }
        Ok(Self { map })
    }

    /// `null` counts as absent.
    pub fn opt<T: DeserializeOwned>(&mut self, name: &str) -> Result<Option<T>, ApiError> {
        match self.map.remove(name) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v)
                .map(Some)
                .map_err(|e| ApiError::bad_request(Some(name), format!("invalid `{name}`: {e}"))),
        }
    }

    pub fn req<T: DeserializeOwned>(&mut self, name: &str) -> Result<T, ApiError> {
        self.opt(name)?
            .ok_or_else(|| ApiError::bad_request(Some(name), format!("missing field `{name}`")))
    }

    /// A raw population grid: rectangular, non-empty, finite and non-negative.
    pub fn grid(&mut self, name: &str) -> Result<Grid, ApiError> {
        let rows: Vec<Vec<f64>> = self.req(name)?;
        parse_grid(&rows, name)
    }

    pub fn opt_grid(&mut self, name: &str) -> Result<Option<Grid>, ApiError> {
        let rows: Option<Vec<Vec<f64>>> = self.opt(name)?;
        rows.map(|r| parse_grid(&r, name)).transpose()
    }

    /// Base64 PNG image.
    pub fn image(&mut self, name: &str) -> Result<ImageTile, ApiError> {
        let text: String = self.req(name)?;
        let bytes = STANDARD
            .decode(text.trim())
            .map_err(|e| ApiError::bad_request(Some(name), format!("`{name}` is not base64: {e}")))?;
        ImageTile::from_png(&bytes).map_err(|e| ApiError::bad_request(Some(name), format!("`{name}` is not a PNG: {e}")))
    }
}

fn parse_grid(rows: &[Vec<f64>], name: &str) -> Result<Grid, ApiError> {
    let grid = Grid::from_rows(rows).map_err(|e| ApiError::bad_request(Some(name), format!("`{name}`: {e}")))?;
    for (i, v) in grid.data().iter().enumerate() {
        if !(v.is_finite() && *v >= 0.0) {
            let (y, x) = (i / grid.width(), i % grid.width());
            return Err(ApiError::bad_request(
                Some(name),
                format!("`{name}` cell ({y}, {x}) is {v}; counts must be non-negative"),
            ));
        }
    }
    Ok(grid)
}

pub(crate) fn encode_png(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}
