pub mod density;
pub mod envs;
pub mod ndmath;
pub mod intrinsic;
pub mod pseudometric;
pub mod sac;
pub mod skill_space;
pub mod trainer;
