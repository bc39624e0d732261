//! Spike-camera simulation, spike-stream reconstruction and 3D Gaussian
//! splatting supervised by spike streams.
//!
//! The pipeline runs bottom-up: [`sensor_sim`] turns radiance frames into a
//! [`spike_stream::SpikeStream`], [`recon`] estimates intensity from it,
//! [`scene_forge`] builds synthetic datasets, and [`trainer`] fits a
//! [`gauss_model::GaussianCloud`] through the differentiable [`rasterizer`]
//! against the losses in [`objective`]. [`quality`] scores novel views.

pub mod camera;
pub mod error;
pub mod gauss_model;
pub mod image;
pub mod objective;
pub mod optim;
pub mod quality;
pub mod rasterizer;
pub mod recon;
pub mod scene_forge;
pub mod sensor_sim;
pub mod spike_stream;
pub mod trainer;

pub use error::{Error, Result};
