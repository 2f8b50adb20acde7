//! odgt annotations: one JSON object per line with an `ID` and a `gtboxes` array.
//!
//! Each gtbox carries a `tag` and an `fbox` given as `[x, y, w, h]`. Boxes tagged
//! anything other than `person`, or with `extra.ignore = 1`, become ignore-flagged
//! ground truths. Other fields (`hbox`, `vbox`, `head_attr`, ...) are ignored.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::scene::{Scene, SceneObject};
use super::IoError;
use crate::geometry::Box2D;

pub const PERSON_TAG: &str = "person";

#[derive(Debug, Deserialize)]
struct RawLine {
    #[serde(rename = "ID")]
    id: String,
    #[serde(default)]
    gtboxes: Vec<RawGtBox>,
}

#[derive(Debug, Deserialize)]
struct RawGtBox {
    #[serde(default)]
    tag: Option<String>,
    fbox: [f64; 4],
    #[serde(default)]
    extra: Option<Value>,
}

#[derive(Serialize)]
struct OutLine<'a> {
    #[serde(rename = "ID")]
    id: &'a str,
    gtboxes: Vec<OutGtBox<'a>>,
}

#[derive(Serialize)]
struct OutGtBox<'a> {
    tag: &'a str,
    fbox: [f64; 4],
    extra: OutExtra,
}

#[derive(Serialize)]
struct OutExtra {
    ignore: u8,
}

fn ignore_flag(extra: &Option<Value>) -> bool {
    extra
        .as_ref()
        .and_then(|e| e.get("ignore"))
        .and_then(Value::as_i64)
        .is_some_and(|v| v != 0)
}

/// Parses odgt text. Empty lines are skipped; zero-area boxes are dropped with a warning.
pub fn parse_odgt(text: &str) -> Result<Vec<Scene>, IoError> {
    let mut scenes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLine =
            serde_json::from_str(line).map_err(|e| IoError::invalid(format!("line {line_no}"), e))?;
        let mut objects = Vec::with_capacity(raw.gtboxes.len());
        for (bi, b) in raw.gtboxes.iter().enumerate() {
            let [x, y, w, h] = b.fbox;
            if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) || w < 0.0 || h < 0.0 {
                return Err(IoError::invalid(
                    format!("line {line_no}"),
                    format!("gtbox {bi} has invalid fbox {:?}", b.fbox),
                ));
            }
            if w == 0.0 || h == 0.0 {
                log::warn!("line {line_no}: skipping zero-area gtbox {bi} in {}", raw.id);
                continue;
            }
            let bbox = Box2D::from_xywh(x, y, w, h)
                .map_err(|e| IoError::invalid(format!("line {line_no}"), format!("gtbox {bi}: {e}")))?;
            let tag = b.tag.clone().unwrap_or_else(|| PERSON_TAG.to_string());
            objects.push(SceneObject {
                box2d: Some(bbox),
                box3d: None,
                ignore: tag != PERSON_TAG || ignore_flag(&b.extra),
                tag: Some(tag),
            });
        }
        scenes.push(Scene {
            image_id: raw.id,
            size: None,
            intrinsics: None,
            objects,
        });
    }
    Ok(scenes)
}

/// Canonical odgt output: one line per scene, `fbox` plus `tag` and `extra.ignore`.
/// Objects without a 2D box are omitted.
pub fn serialize_odgt(scenes: &[Scene]) -> String {
    let mut out = String::new();
    for s in scenes {
        let line = OutLine {
            id: &s.image_id,
            gtboxes: s
                .objects
                .iter()
                .filter_map(|o| {
                    let b = o.box2d?;
                    let tag = o.tag.as_deref().unwrap_or(PERSON_TAG);
                    Some(OutGtBox {
                        tag,
                        fbox: [b.x_min, b.y_min, b.width(), b.height()],
                        extra: OutExtra {
                            ignore: (o.ignore && tag == PERSON_TAG) as u8,
                        },
                    })
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("odgt line serializes"));
        out.push('\n');
    }
    out
}
