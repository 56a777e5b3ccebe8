use std::fmt;
use std::str::FromStr;

use crate::DataError;

/// Cell of the 3×3 location grid an object's centroid falls in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Position {
    TopLeft,
    TopCenter,
    TopRight,
    MiddleLeft,
    Center,
    MiddleRight,
    BottomLeft,
    BottomCenter,
    BottomRight,
}

impl Position {
    pub const ALL: [Position; 9] = [
        Position::TopLeft,
        Position::TopCenter,
        Position::TopRight,
        Position::MiddleLeft,
        Position::Center,
        Position::MiddleRight,
        Position::BottomLeft,
        Position::BottomCenter,
        Position::BottomRight,
    ];

    pub fn from_cell(row: usize, col: usize) -> Position {
        assert!(row < 3 && col < 3, "grid cell ({row},{col}) out of range");
        Self::ALL[row * 3 + col]
    }

    /// Cell containing a point given in pixel units of a `size`×`size` image.
    pub fn of_point(y: f64, x: f64, size: usize) -> Position {
        let cell = |v: f64| ((v * 3.0 / size as f64).floor().max(0.0) as usize).min(2);
        Self::from_cell(cell(y), cell(x))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn row(self) -> usize {
        self.index() / 3
    }

    pub fn col(self) -> usize {
        self.index() % 3
    }

    pub fn name(self) -> &'static str {
        match self {
            Position::TopLeft => "top-left",
            Position::TopCenter => "top-center",
            Position::TopRight => "top-right",
            Position::MiddleLeft => "middle-left",
            Position::Center => "middle-center",
            Position::MiddleRight => "middle-right",
            Position::BottomLeft => "bottom-left",
            Position::BottomCenter => "bottom-center",
            Position::BottomRight => "bottom-right",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Texture {
    Smooth,
    Stripes,
    Checker,
    Speckle,
}

impl Texture {
    pub const ALL: [Texture; 4] = [Texture::Smooth, Texture::Stripes, Texture::Checker, Texture::Speckle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Texture::Smooth => "smooth",
            Texture::Stripes => "stripes",
            Texture::Checker => "checker",
            Texture::Speckle => "speckle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Ellipse,
    Rectangle,
    Blob,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Ellipse, Shape::Rectangle, Shape::Blob];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Ellipse => "ellipse",
            Shape::Rectangle => "rectangle",
            Shape::Blob => "blob",
        }
    }
}

macro_rules! name_parse {
    ($t:ty, $what:literal) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $t {
            type Err = DataError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                <$t>::ALL
                    .iter()
                    .copied()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| DataError::Parse(format!("unknown {} '{s}'", $what)))
            }
        }
    };
}

name_parse!(Position, "position");
name_parse!(Texture, "texture");
name_parse!(Shape, "shape");

/// Ground-truth location, texture and shape of one object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AttributeRecord {
    pub position: Position,
    pub texture: Texture,
    pub shape: Shape,
}
