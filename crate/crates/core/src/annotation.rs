//! Attribute annotations: named rectangles locating facial attributes.
//!
//! On disk an annotation is a JSON document
//! `{"image": "<id>", "boxes": {"nose": [x, y, w, h], ...}}` with an optional
//! integer `"label"` carrying the ground-truth class.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    LeftEye,
    RightEye,
    Nose,
    Mouth,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Attribute::LeftEye, Attribute::RightEye, Attribute::Nose, Attribute::Mouth];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::LeftEye => "left_eye",
            Attribute::RightEye => "right_eye",
            Attribute::Nose => "nose",
            Attribute::Mouth => "mouth",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown attribute `{s}` (expected left_eye, right_eye, nose or mouth)")))
    }
}

/// Axis-aligned pixel rectangle, serialised as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.y && row < self.y + self.h && col >= self.x && col < self.x + self.w
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.x + other.w && other.x < self.x + self.w && self.y < other.y + other.h && other.y < self.y + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }
}

impl From<[usize; 4]> for Rect {
    fn from([x, y, w, h]: [usize; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<Rect> for [usize; 4] {
    fn from(r: Rect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeAnnotation {
    #[serde(rename = "image")]
    pub image_id: String,
    #[serde(deserialize_with = "unique_boxes")]
    pub boxes: BTreeMap<Attribute, Rect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl AttributeAnnotation {
    pub fn new(image_id: impl Into<String>) -> Self {
        Self { image_id: image_id.into(), boxes: BTreeMap::new(), label: None }
    }

    pub fn with_box(mut self, attr: Attribute, rect: Rect) -> Self {
        self.boxes.insert(attr, rect);
        self
    }

    pub fn rect(&self, attr: Attribute) -> Result<Rect> {
        self.boxes
            .get(&attr)
            .copied()
            .ok_or_else(|| invalid(format!("annotation `{}` has no `{attr}` box", self.image_id)))
    }

    /// Checks every rectangle lies inside a `width` x `height` image and is at
    /// least 2x2.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        for (attr, r) in &self.boxes {
            if r.w < 2 || r.h < 2 {
                return Err(invalid(format!("`{}`: {attr} box {r:?} smaller than 2x2", self.image_id)));
            }
            if !r.fits(width, height) {
                return Err(invalid(format!(
                    "`{}`: {attr} box {r:?} exceeds {width}x{height} image",
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

fn unique_boxes<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<Attribute, Rect>, D::Error> {
    struct BoxVisitor;

    impl<'de> Visitor<'de> for BoxVisitor {
        type Value = BTreeMap<Attribute, Rect>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a map from attribute name to [x, y, w, h]")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
            let mut out = BTreeMap::new();
            while let Some((attr, rect)) = map.next_entry::<Attribute, Rect>()? {
                if out.insert(attr, rect).is_some() {
                    return Err(serde::de::Error::custom(format!("duplicate box for {attr}")));
                }
            }
            Ok(out)
        }
    }

    d.deserialize_map(BoxVisitor)
}
