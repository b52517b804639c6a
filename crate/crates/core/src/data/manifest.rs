//! Plain-text dataset manifest.
//!
//! ```text
//! #classes: PEDESTRIAN_CROSSING,PASS_RIGHT_SIDE,...   (optional, 10 names)
//! #split: train                                       (optional, train|test)
//! images/000001.png;GIVE_WAY;VISIBLE;10,12,42,44
//! images/000002.png                                   (image without signs)
//! ```
//!
//! Several lines may name the same image; their annotations are merged. Paths
//! are relative to the manifest's directory unless absolute.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const NUM_SIGN_CLASSES: usize = 10;

pub const DEFAULT_CLASS_NAMES: [&str; NUM_SIGN_CLASSES] = [
    "PEDESTRIAN_CROSSING",
    "PASS_RIGHT_SIDE",
    "NO_STOPPING_NO_STANDING",
    "50_SIGN",
    "PRIORITY_ROAD",
    "GIVE_WAY",
    "70_SIGN",
    "80_SIGN",
    "100_SIGN",
    "NO_PARKING",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Visibility {
    Visible,
    Blurred,
    Occluded,
    SideRoad,
}

impl Visibility {
    pub fn as_str(self) -> &'static str {
        match self {
            Visibility::Visible => "VISIBLE",
            Visibility::Blurred => "BLURRED",
            Visibility::Occluded => "OCCLUDED",
            Visibility::SideRoad => "SIDE_ROAD",
        }
    }
}

impl FromStr for Visibility {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "VISIBLE" => Ok(Visibility::Visible),
            "BLURRED" => Ok(Visibility::Blurred),
            "OCCLUDED" => Ok(Visibility::Occluded),
            "SIDE_ROAD" | "SIDEROAD" => Ok(Visibility::SideRoad),
            other => Err(format!("unknown visibility `{other}`")),
        }
    }
}

/// One ground-truth sign. `class_id` is 1-based; 0 is reserved for background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub bbox: BBox,
    pub class_id: usize,
    pub visibility: Visibility,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Path as written in the manifest.
    pub image: PathBuf,
    pub annotations: Vec<Annotation>,
}

impl ManifestEntry {
    pub fn image_id(&self) -> String {
        image_id_of(&self.image)
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.annotations.iter().map(|a| a.bbox).collect()
    }
}

/// File stem used as the image identifier in detection and evaluation files.
pub fn image_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
    pub split: Split,
    /// Directory that relative image paths resolve against.
    pub root: PathBuf,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            class_names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            split: Split::Train,
            root: PathBuf::from("."),
        }
    }
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.image.is_absolute() {
            entry.image.clone()
        } else {
            self.root.join(&entry.image)
        }
    }

    /// 1-based class id for a class name.
    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name).map(|i| i + 1)
    }

    /// Class name for a 1-based id; `BACKGROUND` for 0.
    pub fn class_name(&self, id: usize) -> &str {
        match id {
            0 => "BACKGROUND",
            i => self.class_names.get(i - 1).map_or("UNKNOWN", String::as_str),
        }
    }

    pub fn annotations(&self) -> impl Iterator<Item = &Annotation> {
        self.entries.iter().flat_map(|e| e.annotations.iter())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#classes: {}", self.class_names.join(","));
        let split = match self.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let _ = writeln!(out, "#split: {split}");
        for e in &self.entries {
            let path = e.image.to_string_lossy();
            if e.annotations.is_empty() {
                let _ = writeln!(out, "{path}");
            }
            for a in &e.annotations {
                let b = a.bbox;
                let _ = writeln!(
                    out,
                    "{path};{};{};{},{},{},{}",
                    self.class_name(a.class_id),
                    a.visibility.as_str(),
                    b.x_min,
                    b.y_min,
                    b.x_max,
                    b.y_max
                );
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn parse_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    parse_manifest_str(&text, &path.display().to_string(), root)
}

/// Parses manifest text; `source` names the input in error messages.
pub fn parse_manifest_str(text: &str, source: &str, root: PathBuf) -> Result<DatasetManifest> {
    let mut m = DatasetManifest {
        root,
        ..DatasetManifest::default()
    };
    let fail = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(names) = comment.strip_prefix("classes:") {
                let names: Vec<String> = names.split(',').map(|s| s.trim().to_string()).collect();
                if names.len() != NUM_SIGN_CLASSES || names.iter().any(String::is_empty) {
                    return Err(fail(lineno, format!("expected {NUM_SIGN_CLASSES} class names")));
                }
                if !m.entries.is_empty() {
                    return Err(fail(lineno, "class list must precede entries".into()));
                }
                m.class_names = names;
            } else if let Some(split) = comment.strip_prefix("split:") {
                m.split = match split.trim() {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    other => return Err(fail(lineno, format!("unknown split `{other}`"))),
                };
            }
            continue;
        }
        let fields: Vec<&str> = line.split(';').map(str::trim).collect();
        let image = PathBuf::from(fields[0]);
        if fields[0].is_empty() {
            return Err(fail(lineno, "empty image path".into()));
        }
        let annotation = match fields.len() {
            1 => None,
            4 => {
                let class_id = m
                    .class_id(fields[1])
                    .ok_or_else(|| fail(lineno, format!("unknown class `{}`", fields[1])))?;
                let visibility: Visibility = fields[2].parse().map_err(|e| fail(lineno, e))?;
                let coords: Vec<f64> = fields[3]
                    .split(',')
                    .map(|c| c.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| fail(lineno, format!("bad coordinate: {e}")))?;
                if coords.len() != 4 {
                    return Err(fail(lineno, "expected x_min,y_min,x_max,y_max".into()));
                }
                let bbox = BBox::new(coords[0], coords[1], coords[2], coords[3])
                    .map_err(|e| fail(lineno, e.to_string()))?;
                Some(Annotation {
                    image_id: image_id_of(&image),
                    bbox,
                    class_id,
                    visibility,
                })
            }
            n => return Err(fail(lineno, format!("expected 1 or 4 fields, got {n}"))),
        };
        let entry = match m.entries.iter_mut().position(|e| e.image == image) {
            Some(i) => &mut m.entries[i],
            None => {
                m.entries.push(ManifestEntry {
                    image,
                    annotations: Vec::new(),
                });
                m.entries.last_mut().expect("just pushed")
            }
        };
        entry.annotations.extend(annotation);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<DatasetManifest> {
        parse_manifest_str(text, "test.txt", PathBuf::from("/data"))
    }

    #[test]
    fn empty_text_is_empty_manifest() {
        let m = parse("").unwrap();
        assert!(m.entries.is_empty());
        assert_eq!(m.class_names.len(), 10);
    }

    #[test]
    fn one_line_one_annotation() {
        let m = parse("img/a.png;GIVE_WAY;VISIBLE;1,2,30,40\n").unwrap();
        assert_eq!(m.entries.len(), 1);
        let a = &m.entries[0].annotations[0];
        assert_eq!(a.class_id, 6);
        assert_eq!(a.image_id, "a");
        assert_eq!(a.bbox, BBox::new(1.0, 2.0, 30.0, 40.0).unwrap());
        assert_eq!(m.resolve(&m.entries[0]), PathBuf::from("/data/img/a.png"));
    }

    #[test]
    fn inverted_box_names_the_line() {
        let err = parse("# header\nimg/a.png;GIVE_WAY;VISIBLE;30,2,10,40\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_class_rejected() {
        assert!(parse("a.png;STOP;VISIBLE;0,0,1,1").is_err());
    }

    #[test]
    fn bare_path_is_negative_image() {
        let m = parse("neg.png\n").unwrap();
        assert!(m.entries[0].annotations.is_empty());
    }

    #[test]
    fn lines_for_same_image_merge() {
        let m = parse("a.png;GIVE_WAY;VISIBLE;0,0,1,1\na.png;50_SIGN;BLURRED;2,2,5,5\n").unwrap();
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].annotations.len(), 2);
        assert_eq!(m.entries[0].annotations[1].visibility, Visibility::Blurred);
    }

    #[test]
    fn pragmas() {
        let names: Vec<String> = (0..10).map(|i| format!("C{i}")).collect();
        let text = format!("#classes: {}\n#split: test\nx.png;C3;VISIBLE;0,0,1,1\n", names.join(","));
        let m = parse(&text).unwrap();
        assert_eq!(m.split, Split::Test);
        assert_eq!(m.entries[0].annotations[0].class_id, 4);
        assert!(parse("#classes: A,B\n").is_err());
    }
}
