//! Seeded random inputs and synthetic camera frames.

use std::path::Path;

use rand::Rng;

use alpr_core::geometry::{BBox, DetectorHeadSpec};
use alpr_core::imaging::{self, ImageBuf};

pub const PLATE_LUMA: u8 = 240;
pub const GLYPH_LUMA: u8 = 20;

/// Up to `max` valid boxes drawn from a small grid of positions so that
/// overlaps are common, with scores from a coarse set so ties occur.
pub fn random_boxes<R: Rng>(rng: &mut R, max: usize, classes: u32) -> Vec<BBox> {
    let n = rng.gen_range(0..=max);
    (0..n)
        .map(|_| {
            let w = rng.gen_range(1..=8) as f64 / 20.0;
            let h = rng.gen_range(1..=8) as f64 / 20.0;
            let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
            let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
            let score = if rng.gen_bool(0.3) { rng.gen_range(0..=4) as f64 / 4.0 } else { rng.gen_range(0.0..=1.0) };
            BBox::new(cx, cy, w, h, rng.gen_range(0..classes), score).expect("valid box")
        })
        .collect()
}

/// Random logits for a head, biased so a useful share of anchors pass a
/// 0.25 confidence threshold.
pub fn random_head<R: Rng>(rng: &mut R, spec: &DetectorHeadSpec) -> Vec<f32> {
    let per = spec.values_per_anchor();
    (0..spec.tensor_len())
        .map(|i| match i % per {
            0..=1 => rng.gen_range(-6.0f32..6.0),
            2..=3 => rng.gen_range(-2.0f32..2.0),
            _ => rng.gen_range(-4.0f32..3.0),
        })
        .collect()
}

/// Grayscale image whose pixels come from one of several distributions:
/// uniform, two-tone, clustered or a narrow band.
pub fn random_gray<R: Rng>(rng: &mut R, w: u32, h: u32) -> ImageBuf {
    let n = (w * h) as usize;
    let kind = rng.gen_range(0..4);
    let (a, b) = (rng.gen_range(0..=255u8), rng.gen_range(0..=255u8));
    let data: Vec<u8> = (0..n)
        .map(|_| match kind {
            0 => rng.gen(),
            1 => {
                if rng.gen_bool(0.4) {
                    a
                } else {
                    b
                }
            }
            2 => {
                let center = if rng.gen_bool(0.5) { a } else { b };
                center.saturating_add(rng.gen_range(0..20)).saturating_sub(rng.gen_range(0..20))
            }
            _ => a / 2 + rng.gen_range(0..4),
        })
        .collect();
    ImageBuf::from_raw(w, h, 1, data).expect("valid image")
}

/// A light plate with dark vertical glyph bars. Coordinates are in frame
/// pixels; bars are `(x offset, width)` within the plate and span its middle
/// half vertically.
#[derive(Debug, Clone)]
pub struct PlateSpec {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    pub bars: Vec<(u32, u32)>,
}

impl PlateSpec {
    fn is_glyph(&self, px: u32, py: u32) -> bool {
        let (top, bottom) = (self.height / 4, self.height * 3 / 4);
        py >= top && py < bottom && self.bars.iter().any(|&(bx, bw)| px >= bx && px < bx + bw)
    }

    fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }

    /// The plate as the binarizer should see it: 255 for plate, 0 for glyphs.
    pub fn expected_binary(&self) -> ImageBuf {
        let mut data = Vec::with_capacity((self.width * self.height) as usize);
        for py in 0..self.height {
            for px in 0..self.width {
                data.push(if self.is_glyph(px, py) { 0 } else { 255 });
            }
        }
        ImageBuf::from_raw(self.width, self.height, 1, data).expect("valid plate")
    }

    pub fn glyph_pixels(&self) -> u32 {
        let rows = self.height * 3 / 4 - self.height / 4;
        self.bars.iter().map(|&(_, bw)| bw * rows).sum()
    }
}

/// Dark textured background (luma well under 200) with the given plates.
pub fn plate_frame(width: u32, height: u32, plates: &[PlateSpec]) -> ImageBuf {
    let mut data = Vec::with_capacity((width * height * 3) as usize);
    for y in 0..height {
        for x in 0..width {
            let plate = plates.iter().find(|p| p.contains(x, y));
            let v = match plate {
                Some(p) if p.is_glyph(x - p.x, y - p.y) => [GLYPH_LUMA; 3],
                Some(_) => [PLATE_LUMA; 3],
                None => {
                    let t = ((x / 16 + y / 16) % 48) as u8;
                    [40 + t, 50 + t, 30 + t]
                }
            };
            data.extend_from_slice(&v);
        }
    }
    ImageBuf::from_raw(width, height, 3, data).expect("valid frame")
}

/// Writes frames as `000000.ppm`, `000001.ppm`, ... plus a manifest.
pub fn write_frame_dir(dir: &Path, frames: &[ImageBuf], fps: u32) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        imaging::write_pnm(f, &dir.join(format!("{i:06}.ppm"))).map_err(std::io::Error::other)?;
    }
    std::fs::write(dir.join("manifest.txt"), format!("fps={fps}\nframes={}\n", frames.len()))
}

/// Random Bangla plate fragments, each a single grapheme.
pub const TOKENS: [&str; 14] = ["ক", "খ", "গ", "ঢা", "কা", "মে", "ট্রো", "১", "২", "৩", "৪", "০", "-", " "];

pub fn random_tokens<R: Rng>(rng: &mut R, max_len: usize) -> Vec<&'static str> {
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| TOKENS[rng.gen_range(0..TOKENS.len())]).collect()
}

/// A three-frame directory walked through the pipeline by hand.
///
/// Frames are 832x468, which letterboxes to 416x234 content at exactly half
/// scale with 91 rows of padding above. All plate edges and glyph bars sit on
/// even pixels, so the half-scale bilinear resize keeps them crisp and the
/// mock detector sees plate A as a 100x40 block with 5 bars of 4x20 (fill
/// 3600/4000 = 0.9) and plate B as 120x40 with 8 bars of 6x20 (fill
/// 3840/4800 = 0.8). Mapping back through the letterbox recovers the frame
/// rectangles exactly. Frame 1 is flat grey and is gated out. The plates
/// are pure 240/20 two-tone, so Otsu picks 20 and the binarized crop is
/// [`PlateSpec::expected_binary`].
pub struct HandFixture {
    pub frames: Vec<ImageBuf>,
    pub plate_a: PlateSpec,
    pub plate_b: PlateSpec,
    pub fps: u32,
}

pub const PLATE_A_TEXT: &str = "ঢাকা  মেট্রো গ\n১২-৩৪৫৬";
pub const PLATE_B_TEXT: &str = "খুলনা ক ০১-২৩৪৫";

impl HandFixture {
    pub fn new() -> Self {
        let plate_a = PlateSpec { x: 200, y: 200, width: 200, height: 80, bars: (0..5).map(|k| (20 + 36 * k, 8)).collect() };
        let plate_b = PlateSpec { x: 520, y: 300, width: 240, height: 80, bars: (0..8).map(|k| (16 + 28 * k, 12)).collect() };
        let frames = vec![
            plate_frame(832, 468, &[plate_a.clone(), plate_b.clone()]),
            ImageBuf::filled(832, 468, &[128, 128, 128]).expect("valid frame"),
            plate_frame(832, 468, std::slice::from_ref(&plate_a)),
        ];
        Self { frames, plate_a, plate_b, fps: 10 }
    }

    /// `hash<TAB>text` lines answering for the two binarized plates.
    pub fn ocr_manifest(&self) -> String {
        let line = |p: &PlateSpec, text: &str| {
            format!("{}\t{}\n", alpr_core::ocr::content_hash(&p.expected_binary()), text.replace('\n', "\\n"))
        };
        line(&self.plate_a, PLATE_A_TEXT) + &line(&self.plate_b, PLATE_B_TEXT)
    }

    /// Writes `frames/`, `ocr.manifest` and `alpr.conf` under `root`;
    /// returns the config path. The event log goes to `root/events.ndjson`.
    pub fn write(&self, root: &Path) -> std::io::Result<std::path::PathBuf> {
        write_frame_dir(&root.join("frames"), &self.frames, self.fps)?;
        std::fs::write(root.join("ocr.manifest"), self.ocr_manifest())?;
        let config = root.join("alpr.conf");
        std::fs::write(
            &config,
            "source = frames\nocr_mock_manifest = ocr.manifest\nstore_path = events.ndjson\ndrop_policy = block\n",
        )?;
        Ok(config)
    }

    /// The event log the pipeline must write, line by line.
    pub fn expected_log(&self) -> String {
        let a = r#""vehicle_class":"car","vehicle_score":1.0,"plate_rect":{"x":200,"y":200,"width":200,"height":80},"detector_score":0.9,"raw_text":"ঢাকা  মেট্রো গ\n১২-৩৪৫৬","normalized_text":"ঢাকা মেট্রো গ ১২-৩৪৫৬","ocr_ms":0.0,"ocr_status":"ok""#;
        let b = r#""vehicle_class":"car","vehicle_score":1.0,"plate_rect":{"x":520,"y":300,"width":240,"height":80},"detector_score":0.8,"raw_text":"খুলনা ক ০১-২৩৪৫","normalized_text":"খুলনা ক ০১-২৩৪৫","ocr_ms":0.0,"ocr_status":"ok""#;
        [
            format!(r#"{{"seq":1,"frame_index":0,"timestamp_ms":0,{a},"crop_ref":"events.crops/000001.pgm"}}"#),
            format!(r#"{{"seq":2,"frame_index":0,"timestamp_ms":0,{b},"crop_ref":"events.crops/000002.pgm"}}"#),
            format!(r#"{{"seq":3,"frame_index":2,"timestamp_ms":200,{a},"crop_ref":"events.crops/000003.pgm"}}"#),
        ]
        .iter()
        .map(|l| format!("{l}\n"))
        .collect()
    }
}

impl Default for HandFixture {
    fn default() -> Self {
        Self::new()
    }
}

/// A 1920x1080 frame with one plate, for throughput runs.
pub fn full_hd_frame(shift: u32) -> ImageBuf {
    let plate = PlateSpec { x: 800 + shift, y: 700, width: 320, height: 96, bars: (0..6).map(|k| (24 + 48 * k, 16)).collect() };
    plate_frame(1920, 1080, &[plate])
}
