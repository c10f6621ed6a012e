pub mod array;
pub mod clustering;
pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod focusing;
pub mod grid;
pub mod io;
pub mod phalcor;
pub mod rir;
pub mod room;
pub mod scene;
pub mod seeding;
pub mod special;
pub mod stft;
pub mod synth;
