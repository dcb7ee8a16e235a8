//! Annotation parsers (COCO JSON, PASCAL VOC XML, WIDER FACE text) and the
//! provenance-preserving hybrid manifest.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

pub use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::label_space::{ConflictMatrix, DatasetId, HybridLabelSpace, SourceList};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

/// An annotation as it appears in a source file, before label mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAnnotation {
    pub class_name: String,
    pub bbox: BBox,
    /// Crowd, invalid or difficult objects.
    pub ignore: bool,
    pub difficulty: Option<Difficulty>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub original_id: u64,
    pub uri: String,
    pub width: f64,
    pub height: f64,
    pub annotations: Vec<RawAnnotation>,
}

/// All records parsed from one source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub dataset: DatasetId,
    /// Declared class list in source order.
    pub classes: Vec<String>,
    pub images: Vec<RawImage>,
}

impl RawDataset {
    pub fn source_list(&self) -> SourceList {
        SourceList { dataset: self.dataset.clone(), classes: self.classes.clone() }
    }

    pub fn num_annotations(&self) -> usize {
        self.images.iter().map(|i| i.annotations.len()).sum()
    }
}

fn clamp_box(bbox: BBox, width: f64, height: f64, what: impl FnOnce() -> String) -> Result<BBox> {
    bbox.clamp(width, height).ok_or_else(|| Error::NonPositiveBox(format!("{} lies outside the image", what())))
}

#[derive(Deserialize)]
struct CocoDocument {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    width: f64,
    height: f64,
    #[serde(default)]
    file_name: Option<String>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: Option<u64>,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Parses a COCO-format instances document. Boxes are clamped to the image;
/// `iscrowd` annotations are kept with the ignore flag.
pub fn parse_coco(text: &str, dataset: DatasetId) -> Result<RawDataset> {
    let doc: CocoDocument = serde_json::from_str(text).map_err(|e| Error::MalformedDocument(e.to_string()))?;

    let mut categories = HashMap::new();
    let mut classes = Vec::with_capacity(doc.categories.len());
    for c in &doc.categories {
        if categories.insert(c.id, c.name.clone()).is_some() {
            return Err(Error::MalformedDocument(format!("duplicate category id {}", c.id)));
        }
        classes.push(c.name.clone());
    }

    let mut images: BTreeMap<u64, RawImage> = BTreeMap::new();
    for img in &doc.images {
        if !(img.width > 0.0 && img.height > 0.0) {
            return Err(Error::MalformedDocument(format!("image {} has non-positive size", img.id)));
        }
        let uri = img.file_name.clone().unwrap_or_else(|| format!("{}/{}", dataset, img.id));
        let record =
            RawImage { original_id: img.id, uri, width: img.width, height: img.height, annotations: Vec::new() };
        if images.insert(img.id, record).is_some() {
            return Err(Error::MalformedDocument(format!("duplicate image id {}", img.id)));
        }
    }

    for (k, ann) in doc.annotations.iter().enumerate() {
        let label = || ann.id.map_or_else(|| format!("annotation #{k}"), |id| format!("annotation {id}"));
        let image = images
            .get_mut(&ann.image_id)
            .ok_or_else(|| Error::DanglingReference(format!("{} references missing image {}", label(), ann.image_id)))?;
        let class_name = categories.get(&ann.category_id).cloned().ok_or_else(|| {
            Error::DanglingReference(format!("{} references missing category {}", label(), ann.category_id))
        })?;
        let [x, y, w, h] = ann.bbox;
        let bbox = BBox::new(x, y, w, h).map_err(|_| Error::NonPositiveBox(format!("{} has box {:?}", label(), ann.bbox)))?;
        let bbox = clamp_box(bbox, image.width, image.height, label)?;
        image.annotations.push(RawAnnotation { class_name, bbox, ignore: ann.iscrowd != 0, difficulty: None });
    }

    Ok(RawDataset { dataset, classes, images: images.into_values().collect() })
}

#[derive(Debug, Clone)]
pub struct WiderOptions {
    /// Class name given to every box.
    pub class_name: String,
    /// Image size used when `sizes` has no entry for a path.
    pub default_size: (f64, f64),
    pub sizes: HashMap<String, (f64, f64)>,
}

impl Default for WiderOptions {
    fn default() -> Self {
        Self { class_name: "face".to_string(), default_size: (1024.0, 1024.0), sizes: HashMap::new() }
    }
}

fn parse_number(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::MalformedLine { line, reason: format!("expected a number, found {tok:?}") })
}

fn looks_like_box_line(text: &str) -> bool {
    text.split_whitespace().next().is_some_and(|t| t.parse::<f64>().is_ok())
}

/// Parses the WIDER FACE `wider_face_*_bbx_gt.txt` listing.
///
/// Each entry is a path line, a count line and `count` box lines
/// `x y w h blur expression illumination invalid occlusion pose`; a count of
/// zero is followed by one placeholder line. Boxes with `invalid = 1` are
/// kept with the ignore flag. Zero-extent boxes (present in the official
/// files) are dropped.
pub fn parse_wider(text: &str, dataset: DatasetId, opts: &WiderOptions) -> Result<RawDataset> {
    let lines: Vec<(usize, &str)> =
        text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty()).collect();
    let mut images = Vec::new();
    let mut pos = 0;
    while pos < lines.len() {
        let (path_line, path) = lines[pos];
        if looks_like_box_line(path) {
            return Err(Error::MalformedLine { line: path_line, reason: format!("expected an image path, found {path:?}") });
        }
        let (count_line, count_text) = *lines
            .get(pos + 1)
            .ok_or_else(|| Error::MalformedLine { line: path_line, reason: "missing box count".into() })?;
        let count: usize = count_text
            .parse()
            .map_err(|_| Error::MalformedLine { line: count_line, reason: format!("expected a box count, found {count_text:?}") })?;
        pos += 2;

        let expected_lines = count.max(1);
        let available = lines[pos..].iter().take(expected_lines).take_while(|(_, l)| looks_like_box_line(l)).count();
        if available < expected_lines {
            return Err(Error::CountMismatch { line: count_line, expected: count, found: available });
        }

        let (width, height) = opts.sizes.get(path).copied().unwrap_or(opts.default_size);
        let mut annotations = Vec::with_capacity(count);
        for &(line, box_text) in &lines[pos..pos + expected_lines] {
            let toks: Vec<&str> = box_text.split_whitespace().collect();
            if toks.len() < 4 {
                return Err(Error::MalformedLine { line, reason: format!("box line needs at least 4 fields, found {}", toks.len()) });
            }
            let nums = toks.iter().map(|t| parse_number(t, line)).collect::<Result<Vec<f64>>>()?;
            if count == 0 {
                if nums.iter().any(|&v| v != 0.0) {
                    return Err(Error::CountMismatch { line: count_line, expected: 0, found: 1 });
                }
                continue;
            }
            let (x, y, w, h) = (nums[0], nums[1], nums[2], nums[3]);
            if !(w > 0.0 && h > 0.0) {
                continue;
            }
            let ignore = nums.get(7).is_some_and(|&v| v != 0.0);
            let Some(bbox) = BBox { x, y, w, h }.clamp(width, height) else { continue };
            annotations.push(RawAnnotation { class_name: opts.class_name.clone(), bbox, ignore, difficulty: None });
        }
        pos += expected_lines;
        images.push(RawImage { original_id: images.len() as u64, uri: path.to_string(), width, height, annotations });
    }
    Ok(RawDataset { dataset, classes: vec![opts.class_name.clone()], images })
}

#[derive(Debug, Clone, Copy)]
pub struct VocOptions {
    /// Treat `bndbox` as 1-based inclusive pixel indices (VOC devkit), giving
    /// `x = xmin - 1` and `w = xmax - xmin + 1`. Otherwise `x = xmin`, `w = xmax - xmin`.
    pub one_based_inclusive: bool,
}

impl Default for VocOptions {
    fn default() -> Self {
        Self { one_based_inclusive: true }
    }
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn child_text<'a>(node: roxmltree::Node<'a, '_>, name: &str) -> Result<&'a str> {
    child(node, name)
        .and_then(|c| c.text())
        .map(str::trim)
        .ok_or_else(|| Error::MalformedDocument(format!("<{}> lacks <{name}>", node.tag_name().name())))
}

fn child_number(node: roxmltree::Node<'_, '_>, name: &str) -> Result<f64> {
    let text = child_text(node, name)?;
    text.parse().map_err(|_| Error::MalformedDocument(format!("<{name}> is not a number: {text:?}")))
}

/// Parses one VOC annotation XML file.
pub fn parse_voc(xml: &str, original_id: u64, opts: VocOptions) -> Result<RawImage> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| Error::MalformedDocument(e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(Error::MalformedDocument(format!("root element is <{}>", root.tag_name().name())));
    }
    let size = child(root, "size").ok_or_else(|| Error::MalformedDocument("missing <size>".into()))?;
    let width = child_number(size, "width")?;
    let height = child_number(size, "height")?;
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::MalformedDocument(format!("non-positive image size {width}x{height}")));
    }
    let uri = child_text(root, "filename").map(str::to_string).unwrap_or_else(|_| original_id.to_string());

    let offset = if opts.one_based_inclusive { 1.0 } else { 0.0 };
    let mut annotations = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = child_text(obj, "name")?.to_string();
        let bnd = child(obj, "bndbox").ok_or_else(|| Error::MalformedDocument(format!("object {name:?} lacks <bndbox>")))?;
        let (xmin, ymin) = (child_number(bnd, "xmin")?, child_number(bnd, "ymin")?);
        let (xmax, ymax) = (child_number(bnd, "xmax")?, child_number(bnd, "ymax")?);
        if xmax <= xmin || ymax <= ymin {
            return Err(Error::InvertedBox(format!("object {name:?}: ({xmin}, {ymin}, {xmax}, {ymax})")));
        }
        let bbox = BBox { x: xmin - offset, y: ymin - offset, w: xmax - xmin + offset, h: ymax - ymin + offset };
        let bbox = clamp_box(bbox, width, height, || format!("object {name:?}"))?;
        let difficult = child_text(obj, "difficult").is_ok_and(|t| t == "1");
        annotations.push(RawAnnotation { class_name: name, bbox, ignore: difficult, difficulty: None });
    }
    Ok(RawImage { original_id, uri, width, height, annotations })
}

/// Parses a set of VOC files. The class list is the sorted set of object names.
pub fn parse_voc_set(files: &[(u64, String)], dataset: DatasetId, opts: VocOptions) -> Result<RawDataset> {
    let images = files.iter().map(|(id, xml)| parse_voc(xml, *id, opts)).collect::<Result<Vec<_>>>()?;
    let classes: BTreeSet<String> =
        images.iter().flat_map(|i| i.annotations.iter().map(|a| a.class_name.clone())).collect();
    Ok(RawDataset { dataset, classes: classes.into_iter().collect(), images })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    pub hybrid_class: usize,
    pub ignore: bool,
    pub difficulty: Option<Difficulty>,
}

/// One image of the hybrid dataset. Annotations inherit `dataset` as their source.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u64,
    pub dataset: DatasetId,
    pub width: f64,
    pub height: f64,
    pub uri: String,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ManifestRepr", into = "ManifestRepr")]
pub struct HybridManifest {
    pub label_space: HybridLabelSpace,
    pub conflicts: ConflictMatrix,
    pub images: Vec<ImageRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRepr {
    version: u32,
    label_space: HybridLabelSpace,
    conflicts: ConflictMatrix,
    images: Vec<ImageRepr>,
}

#[derive(Serialize, Deserialize)]
struct ImageRepr {
    image_id: u64,
    dataset: DatasetId,
    width: f64,
    height: f64,
    uri: String,
    boxes: Vec<BoxRepr>,
}

#[derive(Serialize, Deserialize)]
struct BoxRepr {
    class: usize,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    ignore: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    difficulty: Option<Difficulty>,
}

impl TryFrom<ManifestRepr> for HybridManifest {
    type Error = Error;

    fn try_from(repr: ManifestRepr) -> Result<Self> {
        if repr.version != MANIFEST_VERSION {
            return Err(Error::MalformedDocument(format!("unsupported manifest version {}", repr.version)));
        }
        let images = repr
            .images
            .into_iter()
            .map(|img| {
                let annotations = img
                    .boxes
                    .into_iter()
                    .map(|b| {
                        Ok(Annotation {
                            bbox: BBox::new(b.x, b.y, b.w, b.h)?,
                            hybrid_class: b.class,
                            ignore: b.ignore,
                            difficulty: b.difficulty,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ImageRecord {
                    image_id: img.image_id,
                    dataset: img.dataset,
                    width: img.width,
                    height: img.height,
                    uri: img.uri,
                    annotations,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = HybridManifest { label_space: repr.label_space, conflicts: repr.conflicts, images };
        manifest.validate()?;
        Ok(manifest)
    }
}

impl From<HybridManifest> for ManifestRepr {
    fn from(m: HybridManifest) -> Self {
        let images = m
            .images
            .into_iter()
            .map(|img| ImageRepr {
                image_id: img.image_id,
                dataset: img.dataset,
                width: img.width,
                height: img.height,
                uri: img.uri,
                boxes: img
                    .annotations
                    .into_iter()
                    .map(|a| BoxRepr {
                        class: a.hybrid_class,
                        x: a.bbox.x,
                        y: a.bbox.y,
                        w: a.bbox.w,
                        h: a.bbox.h,
                        ignore: a.ignore,
                        difficulty: a.difficulty,
                    })
                    .collect(),
            })
            .collect();
        ManifestRepr { version: MANIFEST_VERSION, label_space: m.label_space, conflicts: m.conflicts, images }
    }
}

impl HybridManifest {
    /// Checks the cross-reference invariants: unique image ids, declared
    /// datasets, valid classes sourced from the image's dataset.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for img in &self.images {
            if !ids.insert(img.image_id) {
                return Err(Error::MalformedDocument(format!("duplicate image id {}", img.image_id)));
            }
            if !self.label_space.has_dataset(&img.dataset) {
                return Err(Error::UnknownDataset(img.dataset.to_string()));
            }
            for a in &img.annotations {
                let class = self.label_space.class(a.hybrid_class)?;
                if !class.has_source(&img.dataset) {
                    return Err(Error::MalformedDocument(format!(
                        "image {}: class {} has no source in dataset {}",
                        img.image_id, a.hybrid_class, img.dataset
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn image(&self, image_id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    /// `(images, annotations)` per dataset.
    pub fn counts_by_dataset(&self) -> BTreeMap<DatasetId, (usize, usize)> {
        let mut out: BTreeMap<DatasetId, (usize, usize)> = BTreeMap::new();
        for img in &self.images {
            let e = out.entry(img.dataset.clone()).or_default();
            e.0 += 1;
            e.1 += img.annotations.len();
        }
        out
    }
}

/// Maps raw records into the hybrid space. Image ids are reassigned from 1
/// in `(dataset, original id)` order.
pub fn build_manifest(
    raw: &[RawDataset],
    label_space: &HybridLabelSpace,
    conflicts: &ConflictMatrix,
) -> Result<HybridManifest> {
    let mut entries: Vec<(&DatasetId, &RawImage)> = Vec::new();
    for ds in raw {
        if !label_space.has_dataset(&ds.dataset) {
            return Err(Error::UnknownDataset(ds.dataset.to_string()));
        }
        entries.extend(ds.images.iter().map(|img| (&ds.dataset, img)));
    }
    entries.sort_by(|a, b| (a.0, a.1.original_id).cmp(&(b.0, b.1.original_id)));

    let mut images = Vec::with_capacity(entries.len());
    for (k, (dataset, img)) in entries.into_iter().enumerate() {
        let annotations = img
            .annotations
            .iter()
            .map(|a| {
                Ok(Annotation {
                    bbox: a.bbox,
                    hybrid_class: label_space.map_label(dataset, &a.class_name)?,
                    ignore: a.ignore,
                    difficulty: a.difficulty,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        images.push(ImageRecord {
            image_id: k as u64 + 1,
            dataset: dataset.clone(),
            width: img.width,
            height: img.height,
            uri: img.uri.clone(),
            annotations,
        });
    }
    let manifest = HybridManifest { label_space: label_space.clone(), conflicts: conflicts.clone(), images };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_space::{ConflictPolicy, MergeGroup, SourceRef};
    use proptest::prelude::*;

    fn ds(s: &str) -> DatasetId {
        DatasetId::new(s).unwrap()
    }

    const COCO_MIN: &str = r#"{
        "images": [{"id": 7, "width": 640, "height": 480, "file_name": "a.jpg"}],
        "annotations": [{"id": 1, "image_id": 7, "category_id": 1, "bbox": [10, 20, 30, 40], "iscrowd": 0}],
        "categories": [{"id": 1, "name": "person"}]
    }"#;

    #[test]
    fn coco_minimal() {
        let raw = parse_coco(COCO_MIN, ds("coco")).unwrap();
        assert_eq!(raw.images.len(), 1);
        assert_eq!(raw.classes, vec!["person"]);
        let a = &raw.images[0].annotations;
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].bbox, BBox { x: 10.0, y: 20.0, w: 30.0, h: 40.0 });
        assert!(!a[0].ignore);
    }

    #[test]
    fn coco_clamps_and_flags_crowd() {
        let doc = COCO_MIN.replace("[10, 20, 30, 40], \"iscrowd\": 0", "[630, 470, 30, 40], \"iscrowd\": 1");
        let raw = parse_coco(&doc, ds("coco")).unwrap();
        let a = &raw.images[0].annotations[0];
        assert_eq!((a.bbox.w, a.bbox.h), (10.0, 10.0));
        assert!(a.ignore);
    }

    #[test]
    fn coco_errors() {
        let dangling = COCO_MIN.replace("\"image_id\": 7", "\"image_id\": 8");
        assert!(matches!(parse_coco(&dangling, ds("coco")), Err(Error::DanglingReference(_))));
        let bad_cat = COCO_MIN.replace("\"category_id\": 1", "\"category_id\": 3");
        assert!(matches!(parse_coco(&bad_cat, ds("coco")), Err(Error::DanglingReference(_))));
        let zero = COCO_MIN.replace("[10, 20, 30, 40]", "[10, 20, 0, 40]");
        assert!(matches!(parse_coco(&zero, ds("coco")), Err(Error::NonPositiveBox(_))));
        assert!(matches!(parse_coco("{\"images\": []}", ds("coco")), Err(Error::MalformedDocument(_))));
    }

    const WIDER_FIXTURE: &str = "\
0--Parade/a.jpg
2
10 20 30 40 0 0 0 0 0 0
100 120 15 18 2 0 0 1 0 0
0--Parade/b.jpg
0
0 0 0 0 0 0 0 0 0 0
1--Handshaking/c.jpg
1
5 5 8 9 1 0 0 0 0 0
";

    #[test]
    fn wider_fixture() {
        let raw = parse_wider(WIDER_FIXTURE, ds("widerface"), &WiderOptions::default()).unwrap();
        // Reference parse written out by hand.
        let expected: Vec<(&str, Vec<(f64, f64, f64, f64, bool)>)> = vec![
            ("0--Parade/a.jpg", vec![(10.0, 20.0, 30.0, 40.0, false), (100.0, 120.0, 15.0, 18.0, true)]),
            ("0--Parade/b.jpg", vec![]),
            ("1--Handshaking/c.jpg", vec![(5.0, 5.0, 8.0, 9.0, false)]),
        ];
        assert_eq!(raw.images.len(), expected.len());
        for (img, (uri, boxes)) in raw.images.iter().zip(&expected) {
            assert_eq!(&img.uri, uri);
            let got: Vec<_> =
                img.annotations.iter().map(|a| (a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h, a.ignore)).collect();
            assert_eq!(&got, boxes);
            assert!(img.annotations.iter().all(|a| a.class_name == "face"));
        }
    }

    #[test]
    fn wider_count_mismatch() {
        let text = "a.jpg\n3\n1 1 5 5\n2 2 5 5\nb.jpg\n1\n1 1 3 3\n";
        assert!(matches!(
            parse_wider(text, ds("widerface"), &WiderOptions::default()),
            Err(Error::CountMismatch { expected: 3, found: 2, .. })
        ));
        let truncated = "a.jpg\n2\n1 1 5 5\n";
        assert!(matches!(parse_wider(truncated, ds("widerface"), &WiderOptions::default()), Err(Error::CountMismatch { .. })));
        let bad = "a.jpg\ntwo\n";
        assert!(matches!(parse_wider(bad, ds("widerface"), &WiderOptions::default()), Err(Error::MalformedLine { line: 2, .. })));
        let short = "a.jpg\n1\n1 1 5\n";
        assert!(matches!(parse_wider(short, ds("widerface"), &WiderOptions::default()), Err(Error::MalformedLine { line: 3, .. })));
    }

    fn voc_xml(objects: &str) -> String {
        format!(
            "<annotation><filename>000001.jpg</filename><size><width>100</width><height>80</height><depth>3</depth></size>{objects}</annotation>"
        )
    }

    /// Number of integer pixels `(i, j)` with `lo <= i <= hi` in both axes.
    fn inclusive_pixel_count(xmin: i64, ymin: i64, xmax: i64, ymax: i64) -> usize {
        (xmin..=xmax).flat_map(|i| (ymin..=ymax).map(move |j| (i, j))).count()
    }

    #[test]
    fn voc_inclusive_convention() {
        let xml = voc_xml("<object><name>dog</name><difficult>0</difficult><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>11</xmax><ymax>21</ymax></bndbox></object>");
        let img = parse_voc(&xml, 1, VocOptions::default()).unwrap();
        let b = img.annotations[0].bbox;
        assert_eq!((b.x, b.y), (0.0, 0.0));
        assert_eq!(b.w * b.h, inclusive_pixel_count(1, 1, 11, 21) as f64);
        assert_eq!((b.w, b.h), (11.0, 21.0));

        let img = parse_voc(&xml, 1, VocOptions { one_based_inclusive: false }).unwrap();
        let b = img.annotations[0].bbox;
        assert_eq!((b.x, b.y, b.w, b.h), (1.0, 1.0, 10.0, 20.0));
    }

    #[test]
    fn voc_edge_cases() {
        let img = parse_voc(&voc_xml(""), 3, VocOptions::default()).unwrap();
        assert!(img.annotations.is_empty());
        assert_eq!((img.width, img.height), (100.0, 80.0));

        let inverted = voc_xml("<object><name>dog</name><bndbox><xmin>5</xmin><ymin>1</ymin><xmax>5</xmax><ymax>9</ymax></bndbox></object>");
        assert!(matches!(parse_voc(&inverted, 1, VocOptions::default()), Err(Error::InvertedBox(_))));
        assert!(matches!(parse_voc("<annotation>", 1, VocOptions::default()), Err(Error::MalformedDocument(_))));

        let difficult = voc_xml("<object><name>cat</name><difficult>1</difficult><bndbox><xmin>2</xmin><ymin>2</ymin><xmax>9</xmax><ymax>9</ymax></bndbox></object>");
        assert!(parse_voc(&difficult, 1, VocOptions::default()).unwrap().annotations[0].ignore);
    }

    proptest! {
        #[test]
        fn voc_area_matches_pixel_count(xmin in 1i64..30, ymin in 1i64..30, dw in 1i64..30, dh in 1i64..30) {
            let (xmax, ymax) = (xmin + dw, ymin + dh);
            let xml = voc_xml(&format!("<object><name>a</name><bndbox><xmin>{xmin}</xmin><ymin>{ymin}</ymin><xmax>{xmax}</xmax><ymax>{ymax}</ymax></bndbox></object>"));
            let b = parse_voc(&xml, 1, VocOptions::default()).unwrap().annotations[0].bbox;
            prop_assert_eq!(b.w * b.h, inclusive_pixel_count(xmin, ymin, xmax, ymax) as f64);
        }
    }

    fn face_ped_raw() -> Vec<RawDataset> {
        let face = parse_wider(WIDER_FIXTURE, ds("widerface"), &WiderOptions::default()).unwrap();
        let ped = parse_wider(
            "p/1.jpg\n1\n3 4 10 30\np/0.jpg\n2\n1 1 5 12\n20 20 6 14\n",
            ds("widerped"),
            &WiderOptions { class_name: "pedestrian".into(), ..Default::default() },
        )
        .unwrap();
        vec![ped, face]
    }

    #[test]
    fn manifest_keeps_provenance() {
        let raw = face_ped_raw();
        let sources: Vec<_> = raw.iter().map(RawDataset::source_list).collect();
        let space = HybridLabelSpace::build(&sources, &[]).unwrap();
        let conflicts = ConflictMatrix::new(space.datasets().to_vec(), ConflictPolicy::AllConflicting);
        let m = build_manifest(&raw, &space, &conflicts).unwrap();
        let counts = m.counts_by_dataset();
        for r in &raw {
            assert_eq!(counts[&r.dataset], (r.images.len(), r.num_annotations()));
        }
        // Sorted by (dataset, original id) and numbered from 1.
        let order: Vec<(&str, u64)> = m.images.iter().map(|i| (i.dataset.as_str(), i.image_id)).collect();
        assert_eq!(order, vec![("widerface", 1), ("widerface", 2), ("widerface", 3), ("widerped", 4), ("widerped", 5)]);
        assert_eq!(m.images[3].uri, "p/1.jpg");

        let json = m.to_json().unwrap();
        let back = HybridManifest::from_json(&json).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), json);
    }

    #[test]
    fn manifest_merge_maps_to_one_class() {
        let coco = parse_coco(COCO_MIN, ds("coco")).unwrap();
        let ped = parse_wider("p/1.jpg\n1\n3 4 10 30\n", ds("widerped"), &WiderOptions { class_name: "pedestrian".into(), ..Default::default() }).unwrap();
        let raw = vec![coco, ped];
        let sources: Vec<_> = raw.iter().map(RawDataset::source_list).collect();
        let merges = vec![MergeGroup::new(vec![SourceRef::new("coco", "person").unwrap(), SourceRef::new("widerped", "pedestrian").unwrap()])];
        let space = HybridLabelSpace::build(&sources, &merges).unwrap();
        let conflicts = ConflictMatrix::new(space.datasets().to_vec(), ConflictPolicy::AllConflicting);
        let m = build_manifest(&raw, &space, &conflicts).unwrap();
        let classes: BTreeSet<usize> = m.images.iter().flat_map(|i| i.annotations.iter().map(|a| a.hybrid_class)).collect();
        assert_eq!(classes.len(), 1);
    }

    #[test]
    fn manifest_unknown_class() {
        let raw = face_ped_raw();
        let space = HybridLabelSpace::build(&[SourceList::new("widerface", &["face"]).unwrap(), SourceList::new("widerped", &["person"]).unwrap()], &[]).unwrap();
        let conflicts = ConflictMatrix::new(space.datasets().to_vec(), ConflictPolicy::AllConflicting);
        assert!(matches!(build_manifest(&raw, &space, &conflicts), Err(Error::UnknownSourceClass { .. })));
    }

    #[test]
    fn manifest_rejects_foreign_class() {
        let raw = face_ped_raw();
        let sources: Vec<_> = raw.iter().map(RawDataset::source_list).collect();
        let space = HybridLabelSpace::build(&sources, &[]).unwrap();
        let conflicts = ConflictMatrix::new(space.datasets().to_vec(), ConflictPolicy::AllConflicting);
        let mut m = build_manifest(&raw, &space, &conflicts).unwrap();
        let face = space.map_label(&ds("widerface"), "face").unwrap();
        let ped_img = m.images.iter_mut().find(|i| i.dataset.as_str() == "widerped").unwrap();
        ped_img.annotations[0].hybrid_class = face;
        assert!(m.validate().is_err());
    }
}
