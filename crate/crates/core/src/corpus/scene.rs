//! Procedural interior scenes: a wall band above a horizon line, a floor band
//! below it, and axis-aligned furniture rectangles standing on the floor.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::image::ImageSample;
use crate::seed;
use crate::{Error, Result};

pub const MAX_FURNITURE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoomType {
    Bedroom,
    LivingRoom,
    Kitchen,
    Bathroom,
    Office,
    DiningRoom,
}

impl RoomType {
    pub const ALL: [RoomType; 6] = [
        RoomType::Bedroom,
        RoomType::LivingRoom,
        RoomType::Kitchen,
        RoomType::Bathroom,
        RoomType::Office,
        RoomType::DiningRoom,
    ];

    pub fn word(self) -> &'static str {
        match self {
            RoomType::Bedroom => "bedroom",
            RoomType::LivingRoom => "livingroom",
            RoomType::Kitchen => "kitchen",
            RoomType::Bathroom => "bathroom",
            RoomType::Office => "office",
            RoomType::DiningRoom => "diningroom",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|r| *r == self).expect("listed")
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.word() == word)
    }

    /// Vertical position of the wall/floor boundary as a fraction of height.
    pub fn horizon(self) -> f32 {
        match self {
            RoomType::Office => 0.40,
            RoomType::DiningRoom => 0.45,
            RoomType::Bedroom => 0.50,
            RoomType::LivingRoom => 0.55,
            RoomType::Kitchen => 0.60,
            RoomType::Bathroom => 0.65,
        }
    }

    pub fn furniture(self) -> &'static [FurnitureKind] {
        use FurnitureKind::*;
        match self {
            RoomType::Bedroom => &[Bed, Lamp, Cabinet],
            RoomType::LivingRoom => &[Sofa, Table, Lamp, Chair],
            RoomType::Kitchen => &[Cabinet, Table, Chair],
            RoomType::Bathroom => &[Cabinet, Lamp],
            RoomType::Office => &[Table, Chair, Cabinet, Lamp],
            RoomType::DiningRoom => &[Table, Chair, Lamp],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Modern,
    Rustic,
    Minimalist,
    Industrial,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Modern, Style::Rustic, Style::Minimalist, Style::Industrial];

    pub fn word(self) -> &'static str {
        match self {
            Style::Modern => "modern",
            Style::Rustic => "rustic",
            Style::Minimalist => "minimalist",
            Style::Industrial => "industrial",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.word() == word)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaletteColor {
    Beige,
    White,
    Gray,
    Charcoal,
    Red,
    Green,
    Blue,
    Yellow,
}

impl PaletteColor {
    pub const ALL: [PaletteColor; 8] = [
        PaletteColor::Beige,
        PaletteColor::White,
        PaletteColor::Gray,
        PaletteColor::Charcoal,
        PaletteColor::Red,
        PaletteColor::Green,
        PaletteColor::Blue,
        PaletteColor::Yellow,
    ];

    pub fn word(self) -> &'static str {
        match self {
            PaletteColor::Beige => "beige",
            PaletteColor::White => "white",
            PaletteColor::Gray => "gray",
            PaletteColor::Charcoal => "charcoal",
            PaletteColor::Red => "red",
            PaletteColor::Green => "green",
            PaletteColor::Blue => "blue",
            PaletteColor::Yellow => "yellow",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == word)
    }

    pub fn rgb8(self) -> [u8; 3] {
        match self {
            PaletteColor::Beige => [225, 205, 170],
            PaletteColor::White => [245, 245, 240],
            PaletteColor::Gray => [128, 128, 128],
            PaletteColor::Charcoal => [50, 50, 55],
            PaletteColor::Red => [190, 50, 45],
            PaletteColor::Green => [60, 140, 70],
            PaletteColor::Blue => [50, 90, 180],
            PaletteColor::Yellow => [230, 200, 60],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FurnitureKind {
    Bed,
    Sofa,
    Table,
    Chair,
    Cabinet,
    Lamp,
    // Non-design objects, only drawn in the broadened general corpus.
    Tree,
    Bicycle,
    Ball,
}

impl FurnitureKind {
    pub const DESIGN: [FurnitureKind; 6] = [
        FurnitureKind::Bed,
        FurnitureKind::Sofa,
        FurnitureKind::Table,
        FurnitureKind::Chair,
        FurnitureKind::Cabinet,
        FurnitureKind::Lamp,
    ];
    pub const ALL: [FurnitureKind; 9] = [
        FurnitureKind::Bed,
        FurnitureKind::Sofa,
        FurnitureKind::Table,
        FurnitureKind::Chair,
        FurnitureKind::Cabinet,
        FurnitureKind::Lamp,
        FurnitureKind::Tree,
        FurnitureKind::Bicycle,
        FurnitureKind::Ball,
    ];

    pub fn word(self) -> &'static str {
        match self {
            FurnitureKind::Bed => "bed",
            FurnitureKind::Sofa => "sofa",
            FurnitureKind::Table => "table",
            FurnitureKind::Chair => "chair",
            FurnitureKind::Cabinet => "cabinet",
            FurnitureKind::Lamp => "lamp",
            FurnitureKind::Tree => "tree",
            FurnitureKind::Bicycle => "bicycle",
            FurnitureKind::Ball => "ball",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.word() == word)
    }

    /// Nominal (width, height) as canvas fractions.
    pub fn base_size(self) -> (f32, f32) {
        match self {
            FurnitureKind::Bed => (0.40, 0.18),
            FurnitureKind::Sofa => (0.35, 0.20),
            FurnitureKind::Table => (0.25, 0.15),
            FurnitureKind::Chair => (0.10, 0.20),
            FurnitureKind::Cabinet => (0.16, 0.36),
            FurnitureKind::Lamp => (0.06, 0.32),
            FurnitureKind::Tree => (0.14, 0.45),
            FurnitureKind::Bicycle => (0.24, 0.14),
            FurnitureKind::Ball => (0.09, 0.09),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Left,
    Center,
    Right,
}

impl Position {
    pub const ALL: [Position; 3] = [Position::Left, Position::Center, Position::Right];

    pub fn word(self) -> &'static str {
        match self {
            Position::Left => "left",
            Position::Center => "center",
            Position::Right => "right",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.word() == word)
    }

    pub fn of_center(cx: f32) -> Self {
        if cx < 1.0 / 3.0 {
            Position::Left
        } else if cx < 2.0 / 3.0 {
            Position::Center
        } else {
            Position::Right
        }
    }
}

/// Which distribution a scene is drawn from: the design domain, or the
/// broadened general distribution (color and horizon jitter, non-design objects).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneDomain {
    Design,
    General,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Furniture {
    pub kind: FurnitureKind,
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub color_name: PaletteColor,
    pub color: [f32; 3],
}

impl Furniture {
    pub fn position(&self) -> Position {
        Position::of_center(self.x + self.w / 2.0)
    }

    fn contains(&self, u: f32, v: f32) -> bool {
        u >= self.x && u < self.x + self.w && v >= self.y && v < self.y + self.h
    }
}

/// Structured ground truth a scene image is rendered from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub domain: SceneDomain,
    pub room_type: RoomType,
    pub style: Style,
    pub wall: PaletteColor,
    pub floor: PaletteColor,
    pub wall_color: [f32; 3],
    pub floor_color: [f32; 3],
    pub horizon: f32,
    pub furniture: Vec<Furniture>,
}

fn to_unit(c: [u8; 3]) -> [f32; 3] {
    [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0]
}

fn jitter(rng: &mut seed::Rng, c: [u8; 3], amount: i32) -> [u8; 3] {
    c.map(|v| (v as i32 + rng.random_range(-amount..=amount)).clamp(0, 255) as u8)
}

fn pick<T: Copy>(rng: &mut seed::Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

impl SceneSpec {
    /// Deterministically draw a scene from `seed`.
    pub fn generate(seed_value: u64, domain: SceneDomain) -> Self {
        let mut rng = seed::rng(seed_value);
        let general = domain == SceneDomain::General;
        let color_jitter = if general { 20 } else { 0 };

        let room_type = pick(&mut rng, &RoomType::ALL);
        let style = pick(&mut rng, &Style::ALL);
        let wall = pick(&mut rng, &PaletteColor::ALL);
        let floor_choices: Vec<_> = PaletteColor::ALL.into_iter().filter(|c| *c != wall).collect();
        let floor = pick(&mut rng, &floor_choices);
        let mut horizon = room_type.horizon();
        if general {
            horizon = (horizon + rng.random_range(-0.06f32..=0.06)).clamp(0.3, 0.75);
        }
        let wall_color = to_unit(jitter(&mut rng, wall.rgb8(), color_jitter));
        let floor_color = to_unit(jitter(&mut rng, floor.rgb8(), color_jitter));

        let count = if general {
            rng.random_range(1..=6usize)
        } else {
            rng.random_range(1..=4usize)
        };
        let kinds: &[FurnitureKind] = if general { &FurnitureKind::ALL } else { room_type.furniture() };
        let scale_range = if general { 0.7f32..=1.3 } else { 0.85f32..=1.15 };
        let color_choices: Vec<_> = PaletteColor::ALL
            .into_iter()
            .filter(|c| *c != wall && *c != floor)
            .collect();
        let mut furniture = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = pick(&mut rng, kinds);
            let (bw, bh) = kind.base_size();
            let scale = rng.random_range(scale_range.clone());
            let w = (bw * scale).min(0.9);
            let h = (bh * scale).min(0.9);
            let x = rng.random_range(0.0..=(1.0 - w));
            let low = (horizon + 0.05).max(h);
            let bottom = if low < 0.98 { rng.random_range(low..=0.98) } else { 0.98f32.max(h) };
            let y = (bottom - h).max(0.0);
            let color_name = pick(&mut rng, &color_choices);
            let color = to_unit(jitter(&mut rng, color_name.rgb8(), color_jitter));
            furniture.push(Furniture {
                kind,
                x,
                y,
                w,
                h,
                color_name,
                color,
            });
        }
        Self {
            seed: seed_value,
            domain,
            room_type,
            style,
            wall,
            floor,
            wall_color,
            floor_color,
            horizon,
            furniture,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.furniture.len() > MAX_FURNITURE {
            return Err(Error::InvalidConfig(format!(
                "scene has {} furniture items (max {MAX_FURNITURE})",
                self.furniture.len()
            )));
        }
        for f in &self.furniture {
            let inside = f.x >= 0.0 && f.y >= 0.0 && f.x + f.w <= 1.0 + 1e-6 && f.y + f.h <= 1.0 + 1e-6;
            if !inside {
                return Err(Error::InvalidConfig(format!("{:?} leaves the canvas", f.kind)));
            }
        }
        Ok(())
    }

    fn background(&self, u: f32, v: f32) -> [f32; 3] {
        let shade = |c: [f32; 3], factor: f32| -> [f32; 3] {
            c.map(|x| (x * 255.0 * factor).round().clamp(0.0, 255.0) / 255.0)
        };
        if v < self.horizon {
            match self.style {
                Style::Rustic if (u * 8.0).fract() < 0.2 => shade(self.wall_color, 0.8),
                Style::Industrial if (v * 8.0).fract() < 0.15 => shade(self.wall_color, 0.7),
                _ => self.wall_color,
            }
        } else {
            match self.style {
                Style::Minimalist if v < self.horizon + 0.05 => to_unit(PaletteColor::White.rgb8()),
                Style::Rustic if (v * 10.0).fract() < 0.2 => shade(self.floor_color, 0.85),
                _ => self.floor_color,
            }
        }
    }

    /// Rasterise at `resolution`², sampling each pixel at its center.
    /// Each pixel is the box average of a fixed 128x128 sample lattice (or
    /// point-sampled above that), so `render(2r)` box-downsampled by 2 equals
    /// `render(r)` up to rounding.
    pub fn render(&self, resolution: usize) -> Result<ImageSample> {
        check_resolution(resolution)?;
        let sub = (SAMPLE_LATTICE / resolution).max(1);
        let fine = (resolution * sub) as f64;
        let norm = 1.0 / (sub * sub) as f64;
        let mut pixels = Vec::with_capacity(resolution * resolution * 3);
        for i in 0..resolution {
            for j in 0..resolution {
                let mut acc = [0f64; 3];
                for si in 0..sub {
                    let v = (((i * sub + si) as f64 + 0.5) / fine) as f32;
                    for sj in 0..sub {
                        let u = (((j * sub + sj) as f64 + 0.5) / fine) as f32;
                        let color = self.color_at(u, v);
                        for (a, c) in acc.iter_mut().zip(color) {
                            *a += c as f64;
                        }
                    }
                }
                pixels.extend(acc.iter().map(|a| (a * norm) as f32));
            }
        }
        ImageSample::new(pixels, resolution, self.seed)
    }

    fn color_at(&self, u: f32, v: f32) -> [f32; 3] {
        self.furniture
            .iter()
            .rev()
            .find(|f| f.contains(u, v))
            .map(|f| f.color)
            .unwrap_or_else(|| self.background(u, v))
    }
}

const SAMPLE_LATTICE: usize = 128;

pub fn check_resolution(resolution: usize) -> Result<()> {
    if resolution < 16 || !resolution.is_power_of_two() {
        return Err(Error::InvalidResolution(resolution));
    }
    Ok(())
}

/// Render the design-domain scene for `seed` at `resolution`.
pub fn gen_scene(seed_value: u64, resolution: usize) -> Result<(ImageSample, SceneSpec)> {
    gen_scene_in(seed_value, resolution, SceneDomain::Design)
}

pub fn gen_scene_in(seed_value: u64, resolution: usize, domain: SceneDomain) -> Result<(ImageSample, SceneSpec)> {
    check_resolution(resolution)?;
    let spec = SceneSpec::generate(seed_value, domain);
    let image = spec.render(resolution)?;
    Ok((image, spec))
}
