use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const GRID: usize = 4;
pub const CELL: usize = 8;
pub const IMAGE_SIZE: usize = GRID * CELL;
pub const CHANNELS: usize = 3;
pub const MAX_OBJECTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|x| x.word() == s)
    }

    fn covers(self, y: usize, x: usize) -> bool {
        let cy = y as f64 + 0.5;
        let cx = x as f64 + 0.5;
        match self {
            Shape::Square => (1..7).contains(&y) && (1..7).contains(&x),
            Shape::Circle => (cy - 4.0).powi(2) + (cx - 4.0).powi(2) <= 9.0,
            Shape::Triangle => (1..7).contains(&y) && (cx - 4.0).abs() <= 0.5 * (cy - 1.0) + 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|x| x.word() == s)
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub row: usize,
    pub col: usize,
}

impl Object {
    pub fn cell(&self) -> usize {
        self.row * GRID + self.col
    }

    fn phrase(&self) -> String {
        format!("a {} {}", self.color.word(), self.shape.word())
    }
}

/// A scene on the 4×4 grid. Objects are kept in row-major cell order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub seed: u64,
    pub objects: Vec<Object>,
}

impl Scene {
    /// Objects are sorted into cell order; checks 1..=3 objects and distinct cells.
    pub fn new(id: u64, seed: u64, mut objects: Vec<Object>) -> Result<Scene> {
        if objects.is_empty() || objects.len() > MAX_OBJECTS {
            return Err(Error::contract(format!("scene needs 1..=3 objects, got {}", objects.len())));
        }
        if objects.iter().any(|o| o.row >= GRID || o.col >= GRID) {
            return Err(Error::contract("object outside the grid"));
        }
        objects.sort_by_key(Object::cell);
        if objects.windows(2).any(|w| w[0].cell() == w[1].cell()) {
            return Err(Error::contract("two objects share a cell"));
        }
        Ok(Scene { id, seed, objects })
    }

    pub fn random(id: u64, seed: u64, rng: &mut Rng) -> Scene {
        let n = 1 + rng.below(MAX_OBJECTS);
        let mut cells: Vec<usize> = (0..GRID * GRID).collect();
        rng.shuffle(&mut cells);
        let objects = cells[..n]
            .iter()
            .map(|&c| Object {
                shape: Shape::ALL[rng.below(Shape::ALL.len())],
                color: Color::ALL[rng.below(Color::ALL.len())],
                row: c / GRID,
                col: c % GRID,
            })
            .collect();
        Scene::new(id, seed, objects).expect("random scene is valid")
    }

    pub fn has_combo(&self, shape: Shape, color: Color) -> bool {
        self.objects.iter().any(|o| o.shape == shape && o.color == color)
    }

    pub fn count(&self) -> usize {
        self.objects.len()
    }

    pub fn caption(&self) -> String {
        let o = &self.objects;
        match o.len() {
            1 => {
                let v = if o[0].row < GRID / 2 { "top" } else { "bottom" };
                let h = if o[0].col < GRID / 2 { "left" } else { "right" };
                format!("{} in the {v} {h} corner", o[0].phrase())
            }
            2 => format!("{} {} {}", o[0].phrase(), relation(&o[0], &o[1]), o[1].phrase()),
            _ => format!("{} {} {} and {}", o[0].phrase(), relation(&o[0], &o[1]), o[1].phrase(), o[2].phrase()),
        }
    }

    /// Every question answerable from the scene record, count question first.
    pub fn questions(&self) -> Vec<(String, String)> {
        let mut out = vec![("how many objects are there ?".to_string(), number_word(self.count()).to_string())];
        for s in Shape::ALL {
            let hits: Vec<_> = self.objects.iter().filter(|o| o.shape == s).collect();
            if hits.len() == 1 {
                out.push((format!("what color is the {} ?", s.word()), hits[0].color.word().into()));
            }
        }
        for c in Color::ALL {
            let hits: Vec<_> = self.objects.iter().filter(|o| o.color == c).collect();
            if hits.len() == 1 {
                out.push((format!("what shape is the {} object ?", c.word()), hits[0].shape.word().into()));
            }
        }
        out
    }

    /// Checks an answer against the scene record.
    pub fn verify(&self, question: &str, answer: &str) -> bool {
        let w: Vec<&str> = question.split_whitespace().collect();
        match w.as_slice() {
            ["how", "many", "objects", "are", "there", "?"] => answer == number_word(self.count()),
            ["what", "color", "is", "the", s, "?"] => match Shape::parse(s) {
                Some(s) => {
                    let hits: Vec<_> = self.objects.iter().filter(|o| o.shape == s).collect();
                    hits.len() == 1 && hits[0].color.word() == answer
                }
                None => false,
            },
            ["what", "shape", "is", "the", c, "object", "?"] => match Color::parse(c) {
                Some(c) => {
                    let hits: Vec<_> = self.objects.iter().filter(|o| o.color == c).collect();
                    hits.len() == 1 && hits[0].shape.word() == answer
                }
                None => false,
            },
            _ => false,
        }
    }
}

fn relation(a: &Object, b: &Object) -> &'static str {
    if a.row < b.row {
        "above"
    } else {
        "to the left of"
    }
}

fn number_word(n: usize) -> &'static str {
    match n {
        1 => "one",
        2 => "two",
        _ => "three",
    }
}

/// Rasterizes a scene to `[3, 32, 32]` with a black background and no anti-aliasing.
pub fn render(scene: &Scene) -> Tensor<f32> {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = vec![0.0f32; CHANNELS * plane];
    for o in &scene.objects {
        let rgb = o.color.rgb();
        for y in 0..CELL {
            for x in 0..CELL {
                if o.shape.covers(y, x) {
                    let p = (o.row * CELL + y) * IMAGE_SIZE + o.col * CELL + x;
                    for (ch, v) in rgb.iter().enumerate() {
                        data[ch * plane + p] = *v;
                    }
                }
            }
        }
    }
    Tensor::raw(vec![CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)
}
