//! Procedural edit benchmark.
//!
//! Scenes are sprites on a coarse grid of cells. Each sprite has a shape,
//! one of eight palette colors and a stable identity id. Instructions are
//! short token lists; [`oracle`] gives the exact expected scene for any
//! instruction, and [`parse`] recovers a scene from pixels by nearest-template
//! classification of every cell.

mod eval;
mod generate;

pub use eval::{
    drift_eval, evaluate_edits, scene_from_cells, CategoryScore, CorruptingEditor, DriftRow, EditModel, EvalReport, FlowEditor,
    OracleEditor,
};
pub use generate::{
    generate, generate_drift_scripts, random_scene, Category, CategoryMix, DriftScript, EditExample, GenConfig, LocalOp,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latentseq::ImageTensor;

/// Background level; a multiple of 1/255 so 8-bit PNG storage is lossless.
pub const BACKGROUND: f32 = 128.0 / 255.0;

/// Bitmaps are authored at 4x4 and upscaled by integer factors.
pub const BITMAP: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Black,
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Black,
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Magenta,
        Color::Cyan,
        Color::White,
    ];

    /// Corners of the RGB cube: pairwise distance is at least 1.
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Black => [0.0, 0.0, 0.0],
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    GlyphX,
    GlyphT,
    GlyphL,
}

impl Shape {
    pub const ALL: [Shape; 6] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::GlyphX, Shape::GlyphT, Shape::GlyphL];
    pub const PLAIN: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
    pub const GLYPHS: [Shape; 3] = [Shape::GlyphX, Shape::GlyphT, Shape::GlyphL];

    pub fn is_glyph(self) -> bool {
        Self::GLYPHS.contains(&self)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Row-major 4x4 foreground mask.
    pub fn bitmap(self) -> [[bool; BITMAP]; BITMAP] {
        let rows: [&str; 4] = match self {
            Shape::Square => ["1111", "1111", "1111", "1111"],
            Shape::Circle => ["0110", "1111", "1111", "0110"],
            Shape::Triangle => ["0110", "0110", "1111", "1111"],
            Shape::GlyphX => ["1001", "0110", "0110", "1001"],
            Shape::GlyphT => ["1111", "0110", "0110", "0110"],
            Shape::GlyphL => ["1000", "1000", "1000", "1111"],
        };
        let mut out = [[false; BITMAP]; BITMAP];
        for (r, row) in rows.iter().enumerate() {
            for (c, ch) in row.bytes().enumerate() {
                out[r][c] = ch == b'1';
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];
}

/// Canvas geometry: `rows x cols` cells of `cell_px x cell_px` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
    pub cell_px: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { rows: 4, cols: 4, cell_px: 4 }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.rows > MAX_GRID || self.cols > MAX_GRID {
            return Err(Error::Config(format!("grid must be between 1x1 and {MAX_GRID}x{MAX_GRID}")));
        }
        if self.cell_px == 0 || self.cell_px % BITMAP != 0 {
            return Err(Error::Config(format!("cell_px must be a positive multiple of {BITMAP}")));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.rows * self.cell_px
    }

    pub fn width(&self) -> usize {
        self.cols * self.cell_px
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

pub type SpriteId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sprite {
    pub id: SpriteId,
    pub shape: Shape,
    pub color: Color,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub grid: GridConfig,
    pub sprites: Vec<Sprite>,
}

/// Content of one cell: `None` for empty background.
pub type CellContent = Option<(Shape, Color)>;

impl SceneSpec {
    pub fn new(grid: GridConfig, sprites: Vec<Sprite>) -> Result<Self> {
        let spec = Self { grid, sprites };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.sprites.is_empty() {
            return Err(Error::Scene("a scene needs at least one sprite".into()));
        }
        let mut seen = vec![false; self.grid.cells()];
        let mut ids = std::collections::HashSet::new();
        for s in &self.sprites {
            if s.row >= self.grid.rows || s.col >= self.grid.cols {
                return Err(Error::Scene(format!("sprite #{} outside the grid", s.id)));
            }
            let cell = s.row * self.grid.cols + s.col;
            if std::mem::replace(&mut seen[cell], true) {
                return Err(Error::Scene(format!("two sprites share cell ({}, {})", s.row, s.col)));
            }
            if !ids.insert(s.id) {
                return Err(Error::Scene(format!("duplicate sprite id #{}", s.id)));
            }
        }
        Ok(())
    }

    pub fn sprite(&self, id: SpriteId) -> Result<&Sprite> {
        self.sprites
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Scene(format!("no sprite #{id}")))
    }

    fn sprite_mut(&mut self, id: SpriteId) -> Result<&mut Sprite> {
        self.sprites
            .iter_mut()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Scene(format!("no sprite #{id}")))
    }

    fn occupant(&self, row: usize, col: usize) -> Option<&Sprite> {
        self.sprites.iter().find(|s| s.row == row && s.col == col)
    }

    /// Row-major cell contents; this is what [`parse`] recovers from pixels.
    pub fn cells(&self) -> Vec<CellContent> {
        let mut out = vec![None; self.grid.cells()];
        for s in &self.sprites {
            out[s.row * self.grid.cols + s.col] = Some((s.shape, s.color));
        }
        out
    }

    /// Finds the sprite with the given shape and color.
    pub fn find(&self, shape: Shape, color: Color) -> Result<&Sprite> {
        let mut it = self.sprites.iter().filter(|s| s.shape == shape && s.color == color);
        let first = it
            .next()
            .ok_or_else(|| Error::Scene(format!("no {color:?} {shape:?} in scene")))?;
        if it.next().is_some() {
            return Err(Error::Scene(format!("{color:?} {shape:?} is ambiguous")));
        }
        Ok(first)
    }
}

pub const MAX_GRID: usize = 8;

/// Instruction vocabulary. Token ids are the declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Word {
    Noop,
    Recolor,
    Remove,
    Move,
    Swap,
    Isolate,
    Reglyph,
    At,
    Dir(Direction),
    Color(Color),
    Shape(Shape),
    Row(usize),
    Col(usize),
}

const KEYWORDS: [(Word, &str); 8] = [
    (Word::Noop, "noop"),
    (Word::Recolor, "recolor"),
    (Word::Remove, "remove"),
    (Word::Move, "move"),
    (Word::Swap, "swap"),
    (Word::Isolate, "isolate"),
    (Word::Reglyph, "reglyph"),
    (Word::At, "at"),
];

pub const VOCAB_SIZE: usize = KEYWORDS.len() + 4 + 8 + 6 + 2 * MAX_GRID;

impl Word {
    pub fn all() -> Vec<Word> {
        let mut out: Vec<Word> = KEYWORDS.iter().map(|(w, _)| *w).collect();
        out.extend(Direction::ALL.iter().map(|&d| Word::Dir(d)));
        out.extend(Color::ALL.iter().map(|&c| Word::Color(c)));
        out.extend(Shape::ALL.iter().map(|&s| Word::Shape(s)));
        out.extend((0..MAX_GRID).map(Word::Row));
        out.extend((0..MAX_GRID).map(Word::Col));
        out
    }

    pub fn id(self) -> usize {
        let base = KEYWORDS.len();
        match self {
            Word::Dir(d) => base + d as usize,
            Word::Color(c) => base + 4 + c.index(),
            Word::Shape(s) => base + 12 + s.index(),
            Word::Row(r) => base + 18 + r,
            Word::Col(c) => base + 18 + MAX_GRID + c,
            kw => KEYWORDS.iter().position(|(w, _)| *w == kw).expect("keyword"),
        }
    }

    pub fn from_id(id: usize) -> Option<Word> {
        Word::all().get(id).copied()
    }

    pub fn text(self) -> String {
        match self {
            Word::Dir(d) => format!("{d:?}").to_lowercase(),
            Word::Color(c) => format!("{c:?}").to_lowercase(),
            Word::Shape(s) => serde_json::to_value(s).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
            Word::Row(r) => format!("row{r}"),
            Word::Col(c) => format!("col{c}"),
            kw => KEYWORDS.iter().find(|(w, _)| *w == kw).map(|(_, s)| s.to_string()).unwrap_or_default(),
        }
    }

    pub fn from_text(s: &str) -> Option<Word> {
        Word::all().into_iter().find(|w| w.text() == s)
    }
}

/// Tokenizes whitespace-separated instruction text.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| {
            Word::from_text(&w.to_lowercase())
                .map(Word::id)
                .ok_or_else(|| Error::Scene(format!("unknown instruction word {w:?}")))
        })
        .collect()
}

pub fn detokenize(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| Word::from_id(t).map(Word::text).unwrap_or_else(|| format!("<{t}>")))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A semantic edit; sprites are referenced by identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Instruction {
    Noop,
    Recolor { sprite: SpriteId, color: Color },
    Remove { sprite: SpriteId },
    Move { sprite: SpriteId, dir: Direction },
    SwapColors { a: Color, b: Color },
    Isolate { sprite: SpriteId, row: usize, col: usize },
    Reglyph { sprite: SpriteId, glyph: Shape },
}

impl Instruction {
    /// Token form; sprites are described by their current color and shape.
    pub fn tokens(&self, scene: &SceneSpec) -> Result<Vec<usize>> {
        let desc = |id: SpriteId| -> Result<[Word; 2]> {
            let s = scene.sprite(id)?;
            Ok([Word::Color(s.color), Word::Shape(s.shape)])
        };
        let words: Vec<Word> = match *self {
            Instruction::Noop => vec![Word::Noop],
            Instruction::Recolor { sprite, color } => {
                [&[Word::Recolor][..], &desc(sprite)?, &[Word::Color(color)]].concat()
            }
            Instruction::Remove { sprite } => [&[Word::Remove][..], &desc(sprite)?].concat(),
            Instruction::Move { sprite, dir } => [&[Word::Move][..], &desc(sprite)?, &[Word::Dir(dir)]].concat(),
            Instruction::SwapColors { a, b } => vec![Word::Swap, Word::Color(a), Word::Color(b)],
            Instruction::Isolate { sprite, row, col } => {
                [&[Word::Isolate][..], &desc(sprite)?, &[Word::At, Word::Row(row), Word::Col(col)]].concat()
            }
            Instruction::Reglyph { sprite, glyph } => {
                [&[Word::Reglyph][..], &desc(sprite)?, &[Word::Shape(glyph)]].concat()
            }
        };
        Ok(words.into_iter().map(Word::id).collect())
    }

    /// Resolves a token list against a scene.
    pub fn parse(tokens: &[usize], scene: &SceneSpec) -> Result<Self> {
        let words: Vec<Word> = tokens
            .iter()
            .map(|&t| Word::from_id(t).ok_or_else(|| Error::Scene(format!("token {t} outside vocabulary"))))
            .collect::<Result<_>>()?;
        let bad = || Error::Scene(format!("cannot parse instruction {:?}", detokenize(tokens)));
        let sprite = |c: &Word, s: &Word| -> Result<SpriteId> {
            match (c, s) {
                (Word::Color(c), Word::Shape(s)) => Ok(scene.find(*s, *c)?.id),
                _ => Err(bad()),
            }
        };
        Ok(match words.as_slice() {
            [Word::Noop] => Instruction::Noop,
            [Word::Recolor, c, s, Word::Color(to)] => Instruction::Recolor { sprite: sprite(c, s)?, color: *to },
            [Word::Remove, c, s] => Instruction::Remove { sprite: sprite(c, s)? },
            [Word::Move, c, s, Word::Dir(d)] => Instruction::Move { sprite: sprite(c, s)?, dir: *d },
            [Word::Swap, Word::Color(a), Word::Color(b)] => Instruction::SwapColors { a: *a, b: *b },
            [Word::Isolate, c, s, Word::At, Word::Row(r), Word::Col(k)] => {
                Instruction::Isolate { sprite: sprite(c, s)?, row: *r, col: *k }
            }
            [Word::Reglyph, c, s, Word::Shape(g)] => Instruction::Reglyph { sprite: sprite(c, s)?, glyph: *g },
            _ => return Err(bad()),
        })
    }

    /// Sprites whose appearance or placement this instruction may change.
    pub fn touched(&self, scene: &SceneSpec) -> Vec<SpriteId> {
        match *self {
            Instruction::Noop => vec![],
            Instruction::Recolor { sprite, .. }
            | Instruction::Remove { sprite }
            | Instruction::Move { sprite, .. }
            | Instruction::Isolate { sprite, .. }
            | Instruction::Reglyph { sprite, .. } => vec![sprite],
            Instruction::SwapColors { a, b } => scene
                .sprites
                .iter()
                .filter(|s| s.color == a || s.color == b)
                .map(|s| s.id)
                .collect(),
        }
    }
}

/// What `move` does when the destination is off-grid or occupied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoveRule {
    /// Leave the sprite where it is.
    #[default]
    Clamp,
    /// Report an error.
    Strict,
}

/// Ground-truth scene after applying `instruction`.
pub fn oracle(spec: &SceneSpec, instruction: &Instruction, rule: MoveRule) -> Result<SceneSpec> {
    let mut out = spec.clone();
    match *instruction {
        Instruction::Noop => {}
        Instruction::Recolor { sprite, color } => out.sprite_mut(sprite)?.color = color,
        Instruction::Remove { sprite } => {
            spec.sprite(sprite)?;
            if spec.sprites.len() == 1 {
                return Err(Error::Scene("cannot remove the only sprite".into()));
            }
            out.sprites.retain(|s| s.id != sprite);
        }
        Instruction::Move { sprite, dir } => {
            let s = *spec.sprite(sprite)?;
            let dest = match dir {
                Direction::Left => s.col.checked_sub(1).map(|c| (s.row, c)),
                Direction::Right => (s.col + 1 < spec.grid.cols).then_some((s.row, s.col + 1)),
                Direction::Up => s.row.checked_sub(1).map(|r| (r, s.col)),
                Direction::Down => (s.row + 1 < spec.grid.rows).then_some((s.row + 1, s.col)),
            };
            match dest {
                Some((r, c)) if spec.occupant(r, c).is_none() => {
                    let m = out.sprite_mut(sprite)?;
                    m.row = r;
                    m.col = c;
                }
                _ if rule == MoveRule::Clamp => {}
                Some(_) => return Err(Error::Scene(format!("move of #{sprite} {dir:?} is blocked"))),
                None => return Err(Error::Scene(format!("move of #{sprite} {dir:?} leaves the grid"))),
            }
        }
        Instruction::SwapColors { a, b } => {
            for s in &mut out.sprites {
                if s.color == a {
                    s.color = b;
                } else if s.color == b {
                    s.color = a;
                }
            }
        }
        Instruction::Isolate { sprite, row, col } => {
            if row >= spec.grid.rows || col >= spec.grid.cols {
                return Err(Error::Scene(format!("cell ({row}, {col}) outside the grid")));
            }
            let s = *spec.sprite(sprite)?;
            out.sprites = vec![Sprite { row, col, ..s }];
        }
        Instruction::Reglyph { sprite, glyph } => {
            if !glyph.is_glyph() {
                return Err(Error::Scene(format!("{glyph:?} is not a glyph")));
            }
            let s = out.sprite_mut(sprite)?;
            if !s.shape.is_glyph() {
                return Err(Error::Scene(format!("sprite #{sprite} is not a glyph")));
            }
            s.shape = glyph;
        }
    }
    Ok(out)
}

/// Renders a scene procedurally.
pub fn render(spec: &SceneSpec) -> ImageTensor {
    let g = spec.grid;
    let mut img = ImageTensor::filled(3, g.height(), g.width(), BACKGROUND);
    let scale = g.cell_px / BITMAP;
    for s in &spec.sprites {
        let mask = s.shape.bitmap();
        let rgb = s.color.rgb();
        for y in 0..g.cell_px {
            for x in 0..g.cell_px {
                if mask[y / scale][x / scale] {
                    img.pixel_mut(s.row * g.cell_px + y, s.col * g.cell_px + x).copy_from_slice(&rgb);
                }
            }
        }
    }
    img
}

/// Parsed contents of each cell; `Err(())` marks an unparseable cell.
pub type ParsedCell = std::result::Result<CellContent, ()>;

/// Mean squared pixel error above which a cell is declared unparseable.
pub const UNPARSEABLE_MSE: f32 = 0.2;

/// Classifies each cell as the nearest of all rendered templates
/// (empty background and every shape/color pair).
pub fn parse(image: &ImageTensor, grid: GridConfig) -> Vec<ParsedCell> {
    let templates = cell_templates(grid.cell_px);
    let mut out = Vec::with_capacity(grid.cells());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let mut best = (f32::INFINITY, None);
            for (content, tpl) in &templates {
                let mut err = 0.0;
                for y in 0..grid.cell_px {
                    for x in 0..grid.cell_px {
                        let p = image.pixel(r * grid.cell_px + y, c * grid.cell_px + x);
                        let q = &tpl[(y * grid.cell_px + x) * 3..(y * grid.cell_px + x) * 3 + 3];
                        err += p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
                    }
                }
                if err < best.0 {
                    best = (err, *content);
                }
            }
            let mse = best.0 / (grid.cell_px * grid.cell_px) as f32;
            out.push(if mse <= UNPARSEABLE_MSE { Ok(best.1) } else { Err(()) });
        }
    }
    out
}

fn cell_templates(cell_px: usize) -> Vec<(CellContent, Vec<f32>)> {
    let grid = GridConfig { rows: 1, cols: 1, cell_px };
    let mut out = vec![(None, ImageTensor::filled(3, cell_px, cell_px, BACKGROUND).data)];
    for &shape in &Shape::ALL {
        for &color in &Color::ALL {
            let spec = SceneSpec { grid, sprites: vec![Sprite { id: 0, shape, color, row: 0, col: 0 }] };
            out.push((Some((shape, color)), render(&spec).data));
        }
    }
    out
}

/// Outcome of scoring one edited image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditScore {
    /// 1 when every cell parses to the expected content, else 0.
    pub accuracy: f64,
    /// Fraction of untouched sprites whose shape and color survive in place
    /// (1 when there are none).
    pub identity: f64,
}

pub fn score_edit(output: &ImageTensor, expected: &SceneSpec, touched: &[SpriteId]) -> EditScore {
    let grid = expected.grid;
    if output.height != grid.height() || output.width != grid.width() || output.channels != 3 {
        return EditScore { accuracy: 0.0, identity: 0.0 };
    }
    let parsed = parse(output, grid);
    let want = expected.cells();
    let exact = parsed.iter().zip(&want).all(|(p, w)| p.as_ref() == Ok(w));
    EditScore { accuracy: if exact { 1.0 } else { 0.0 }, identity: identity_score(&parsed, expected, touched) }
}

/// Fraction of sprites in `reference` (excluding `touched`) found intact in
/// their cell of `parsed`.
pub fn identity_score(parsed: &[ParsedCell], reference: &SceneSpec, touched: &[SpriteId]) -> f64 {
    let cols = reference.grid.cols;
    let untouched: Vec<_> = reference.sprites.iter().filter(|s| !touched.contains(&s.id)).collect();
    if untouched.is_empty() {
        return 1.0;
    }
    let kept = untouched
        .iter()
        .filter(|s| parsed[s.row * cols + s.col] == Ok(Some((s.shape, s.color))))
        .count();
    kept as f64 / untouched.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene() -> SceneSpec {
        let g = GridConfig::default();
        SceneSpec::new(
            g,
            vec![
                Sprite { id: 1, shape: Shape::Circle, color: Color::Red, row: 0, col: 0 },
                Sprite { id: 2, shape: Shape::Square, color: Color::Green, row: 1, col: 2 },
                Sprite { id: 3, shape: Shape::GlyphT, color: Color::Blue, row: 3, col: 3 },
                Sprite { id: 4, shape: Shape::Triangle, color: Color::White, row: 2, col: 0 },
                Sprite { id: 5, shape: Shape::Circle, color: Color::Black, row: 3, col: 1 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn vocabulary_is_consistent() {
        let all = Word::all();
        assert_eq!(all.len(), VOCAB_SIZE);
        for (i, w) in all.iter().enumerate() {
            assert_eq!(w.id(), i);
            assert_eq!(Word::from_text(&w.text()), Some(*w));
        }
        let toks = tokenize("recolor red circle blue").unwrap();
        assert_eq!(detokenize(&toks), "recolor red circle blue");
        assert!(tokenize("recolour red").is_err());
    }

    #[test]
    fn instruction_tokens_roundtrip() {
        let s = scene();
        for ins in [
            Instruction::Noop,
            Instruction::Recolor { sprite: 1, color: Color::Cyan },
            Instruction::Remove { sprite: 2 },
            Instruction::Move { sprite: 4, dir: Direction::Up },
            Instruction::SwapColors { a: Color::Red, b: Color::Blue },
            Instruction::Isolate { sprite: 5, row: 2, col: 2 },
            Instruction::Reglyph { sprite: 3, glyph: Shape::GlyphX },
        ] {
            let toks = ins.tokens(&s).unwrap();
            assert_eq!(Instruction::parse(&toks, &s).unwrap(), ins);
        }
    }

    #[test]
    fn render_parse_identity() {
        let s = scene();
        let parsed = parse(&render(&s), s.grid);
        let want: Vec<ParsedCell> = s.cells().into_iter().map(Ok).collect();
        assert_eq!(parsed, want);

        let big = SceneSpec { grid: GridConfig { rows: 3, cols: 5, cell_px: 8 }, ..s.clone() };
        let big = SceneSpec::new(big.grid, vec![Sprite { row: 2, col: 4, ..s.sprites[0] }]).unwrap();
        assert_eq!(parse(&render(&big), big.grid), big.cells().into_iter().map(Ok).collect::<Vec<_>>());
    }

    #[test]
    fn templates_are_well_separated() {
        let t = cell_templates(4);
        for i in 0..t.len() {
            for j in 0..i {
                let d: f32 = t[i].1.iter().zip(&t[j].1).map(|(a, b)| (a - b) * (a - b)).sum();
                assert!(d >= 0.75, "{:?} vs {:?}: {d}", t[i].0, t[j].0);
            }
        }
    }

    #[test]
    fn noop_is_identity() {
        let s = scene();
        assert_eq!(oracle(&s, &Instruction::Noop, MoveRule::Clamp).unwrap(), s);
    }

    #[test]
    fn recolor_changes_only_that_sprite() {
        let s = scene();
        let out = oracle(&s, &Instruction::Recolor { sprite: 1, color: Color::Blue }, MoveRule::Clamp).unwrap();
        let (a, b) = (render(&s), render(&out));
        let cell = s.grid.cell_px;
        for y in 0..a.height {
            for x in 0..a.width {
                if a.pixel(y, x) != b.pixel(y, x) {
                    assert!(y < cell && x < cell, "pixel ({y}, {x}) changed");
                }
            }
        }
        assert_ne!(a, b);
    }

    #[test]
    fn move_at_edge() {
        let s = scene();
        let left = Instruction::Move { sprite: 1, dir: Direction::Left };
        assert_eq!(oracle(&s, &left, MoveRule::Clamp).unwrap(), s);
        assert!(oracle(&s, &left, MoveRule::Strict).is_err());
        let mut crowded = s.clone();
        crowded.sprite_mut(5).unwrap().col = 2;
        let blocked = Instruction::Move { sprite: 5, dir: Direction::Right };
        assert_eq!(oracle(&crowded, &blocked, MoveRule::Clamp).unwrap(), crowded);
        assert!(oracle(&crowded, &blocked, MoveRule::Strict).is_err());
        let ok = oracle(&s, &Instruction::Move { sprite: 1, dir: Direction::Right }, MoveRule::Strict).unwrap();
        assert_eq!((ok.sprite(1).unwrap().row, ok.sprite(1).unwrap().col), (0, 1));
    }

    #[test]
    fn dangling_references_error() {
        let s = scene();
        assert!(oracle(&s, &Instruction::Recolor { sprite: 99, color: Color::Red }, MoveRule::Clamp).is_err());
        assert!(oracle(&s, &Instruction::Reglyph { sprite: 1, glyph: Shape::GlyphL }, MoveRule::Clamp).is_err());
        assert!(oracle(&s, &Instruction::Isolate { sprite: 1, row: 9, col: 0 }, MoveRule::Clamp).is_err());
        assert!(Instruction::parse(&tokenize("remove cyan circle").unwrap(), &s).is_err());
    }

    #[test]
    fn edits_on_disjoint_sprites_commute() {
        let s = scene();
        let mut edits = Vec::new();
        for &id in &[1u32, 2, 3, 4, 5] {
            edits.push(Instruction::Remove { sprite: id });
            edits.push(Instruction::Recolor { sprite: id, color: Color::Yellow });
            edits.push(Instruction::Reglyph { sprite: id, glyph: Shape::GlyphL });
            for d in Direction::ALL {
                edits.push(Instruction::Move { sprite: id, dir: d });
            }
        }
        let mut checked = 0;
        for a in &edits {
            for b in &edits {
                let (ta, tb) = (a.touched(&s), b.touched(&s));
                if ta == tb {
                    continue;
                }
                let ab = oracle(&s, a, MoveRule::Strict).and_then(|x| oracle(&x, b, MoveRule::Strict));
                let ba = oracle(&s, b, MoveRule::Strict).and_then(|x| oracle(&x, a, MoveRule::Strict));
                // moves can only interact through the cells they vacate or fill
                let interacting = matches!(a, Instruction::Move { .. }) || matches!(b, Instruction::Move { .. });
                if let (Ok(ab), Ok(ba)) = (&ab, &ba) {
                    let mut ab = ab.clone();
                    let mut ba = ba.clone();
                    ab.sprites.sort_by_key(|s| s.id);
                    ba.sprites.sort_by_key(|s| s.id);
                    if !interacting || cells_disjoint(&s, a, b) {
                        assert_eq!(ab, ba, "{a:?} then {b:?}");
                        checked += 1;
                    }
                } else if !interacting {
                    assert_eq!(ab.is_ok(), ba.is_ok(), "{a:?} / {b:?}");
                }
            }
        }
        assert!(checked > 100);
    }

    fn cells_disjoint(s: &SceneSpec, a: &Instruction, b: &Instruction) -> bool {
        let footprint = |i: &Instruction| -> Vec<(usize, usize)> {
            let before = s.clone();
            let after = oracle(s, i, MoveRule::Clamp).unwrap_or_else(|_| s.clone());
            let mut cells: Vec<_> = before.sprites.iter().map(|x| (x.row, x.col)).collect();
            cells.extend(after.sprites.iter().map(|x| (x.row, x.col)));
            let touched = i.touched(s);
            let mut out: Vec<_> = before
                .sprites
                .iter()
                .chain(after.sprites.iter())
                .filter(|x| touched.contains(&x.id))
                .map(|x| (x.row, x.col))
                .collect();
            out.sort();
            out.dedup();
            out
        };
        let fa = footprint(a);
        footprint(b).iter().all(|c| !fa.contains(c))
    }

    #[test]
    fn identity_counts_untouched_sprites() {
        let s = scene();
        let target = oracle(&s, &Instruction::Recolor { sprite: 1, color: Color::Blue }, MoveRule::Clamp).unwrap();
        let sc = score_edit(&render(&target), &target, &[1]);
        assert_eq!((sc.accuracy, sc.identity), (1.0, 1.0));

        let mut wrong = target.clone();
        wrong.sprite_mut(2).unwrap().color = Color::Magenta;
        let sc = score_edit(&render(&wrong), &target, &[1]);
        assert_eq!((sc.accuracy, sc.identity), (0.0, 0.75));
    }

    #[test]
    fn noise_scores_zero() {
        let s = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let noise = ImageTensor::new(3, 16, 16, (0..768).map(|_| rng.random::<f32>()).collect()).unwrap();
            assert_eq!(score_edit(&noise, &s, &[]).accuracy, 0.0);
        }
    }
}
