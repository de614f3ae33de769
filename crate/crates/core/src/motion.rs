//! Robot controller: threshold-gated rotate-in-place versus arc pursuit,
//! forward motion, and the externally imposed waiting/charging holds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::battery::BatteryState;
use crate::geometry::{pursuit_curvature, signed_angle_to, Pose2D, Primitive, Vec2};
use crate::planner::{Detour, JunctionRule, PathPlan, PlanError};

/// Heading error below which a latched rotation counts as facing the target.
pub const FACING_TOLERANCE: f64 = 1e-9;
/// Largest gap accepted between the robot and the start of a new plan.
pub const MAX_PLAN_OFFSET: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MotionError {
    #[error("invalid motion parameter: {0}")]
    InvalidParams(&'static str),
    #[error("plan starts {0:.3} m away from the robot")]
    PlanOffset(f64),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionParams {
    pub v_max: f64,
    pub omega_max: f64,
    pub angle_threshold: f64,
    pub near_distance: f64,
    pub arrive_tolerance: f64,
    pub signal_epsilon: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            v_max: 0.65,
            omega_max: 1.8,
            angle_threshold: std::f64::consts::FRAC_PI_3,
            near_distance: 0.3,
            arrive_tolerance: 0.1,
            signal_epsilon: 0.02,
        }
    }
}

impl MotionParams {
    pub fn validate(&self) -> Result<(), MotionError> {
        let positive = [
            (self.v_max, "v_max"),
            (self.omega_max, "omega_max"),
            (self.angle_threshold, "angle_threshold"),
            (self.near_distance, "near_distance"),
            (self.arrive_tolerance, "arrive_tolerance"),
            (self.signal_epsilon, "signal_epsilon"),
        ];
        for (v, name) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MotionError::InvalidParams(name));
            }
        }
        if self.angle_threshold >= std::f64::consts::PI {
            return Err(MotionError::InvalidParams("angle_threshold must be below pi"));
        }
        if self.arrive_tolerance >= self.near_distance {
            return Err(MotionError::InvalidParams(
                "arrive_tolerance must be below near_distance",
            ));
        }
        Ok(())
    }

    pub fn junction_rule(&self) -> JunctionRule {
        JunctionRule {
            angle_threshold: self.angle_threshold,
            near_distance: self.near_distance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Idle,
    RotateInPlace,
    ArcPursuit,
    Forward,
    Waiting,
    Charging,
}

impl Mode {
    pub fn code(self) -> u8 {
        match self {
            Mode::Idle => 0,
            Mode::RotateInPlace => 1,
            Mode::ArcPursuit => 2,
            Mode::Forward => 3,
            Mode::Waiting => 4,
            Mode::Charging => 5,
        }
    }
}

/// Reason the robot is held in place regardless of its plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hold {
    None,
    Waiting,
    Charging,
}

/// Retained original plan while a detour is being followed.
#[derive(Debug, Clone, PartialEq)]
pub struct DetourContext {
    pub original: PathPlan,
    /// Arclength along `original` where the detour was installed.
    pub origin_progress: f64,
    pub branch_point: f64,
    pub rejoin_point: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub pose: Pose2D,
    pub mode: Mode,
    plan: PathPlan,
    plan_progress: f64,
    primitive_index: usize,
    rotate_latched: bool,
    detour: Option<DetourContext>,
    pub hold: Hold,
    pub battery: BatteryState,
}

/// What a single controller tick did.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub translated: f64,
    pub rotated: f64,
    /// The last primitive was reached and the plan cleared.
    pub plan_completed: bool,
}

impl RobotState {
    pub fn new(pose: Pose2D, battery: BatteryState) -> Self {
        Self {
            pose,
            mode: Mode::Idle,
            plan: PathPlan::empty(pose.position()),
            plan_progress: 0.0,
            primitive_index: 0,
            rotate_latched: false,
            detour: None,
            hold: Hold::None,
            battery,
        }
    }

    pub fn plan(&self) -> &PathPlan {
        &self.plan
    }

    pub fn plan_progress(&self) -> f64 {
        self.plan_progress
    }

    pub fn primitive_index(&self) -> usize {
        self.primitive_index
    }

    pub fn rotate_latched(&self) -> bool {
        self.rotate_latched
    }

    pub fn detour(&self) -> Option<&DetourContext> {
        self.detour.as_ref()
    }

    /// Robot's arclength along the retained original plan during a detour.
    pub fn original_progress(&self) -> Option<f64> {
        self.detour
            .as_ref()
            .map(|d| (d.origin_progress + self.plan_progress).min(d.original.total_length()))
    }

    /// End point of the translational primitive currently being pursued.
    pub fn target(&self) -> Option<Vec2> {
        self.plan
            .primitives()
            .get(self.primitive_index)
            .map(Primitive::end_point)
    }

    /// Signed angle and distance to the current target.
    pub fn target_geometry(&self) -> Option<(f64, f64)> {
        let target = self.target()?;
        let d = self.pose.position().distance(target);
        let alpha = signed_angle_to(&self.pose, target).map_or(0.0, |a| a.value());
        Some((alpha, d))
    }

    /// Installs a plan starting at the robot's position.
    pub fn set_plan(&mut self, plan: PathPlan, params: &MotionParams) -> Result<(), MotionError> {
        self.install(plan)?;
        self.detour = None;
        self.mode = select_mode(self, params);
        Ok(())
    }

    fn install(&mut self, plan: PathPlan) -> Result<(), MotionError> {
        plan.check_continuity(1e-6)?;
        if let Some(start) = plan.start_point() {
            let gap = start.distance(self.pose.position());
            if gap > MAX_PLAN_OFFSET {
                return Err(MotionError::PlanOffset(gap));
            }
        }
        self.plan = plan;
        self.plan_progress = 0.0;
        self.primitive_index = 0;
        self.rotate_latched = false;
        self.skip_rotations();
        Ok(())
    }

    pub fn clear_plan(&mut self) {
        self.plan = PathPlan::empty(self.pose.position());
        self.plan_progress = 0.0;
        self.primitive_index = 0;
        self.rotate_latched = false;
        self.detour = None;
        if self.hold == Hold::None {
            self.mode = Mode::Idle;
        }
    }

    /// Switches to `detour`, retaining the current plan as the original.
    pub fn begin_detour(&mut self, detour: Detour, params: &MotionParams) -> Result<(), MotionError> {
        let (original, origin_progress) = match self.detour.take() {
            // Re-detouring keeps the very first plan as the one to revert to.
            Some(ctx) => {
                let p = (ctx.origin_progress + self.plan_progress).min(ctx.original.total_length());
                (ctx.original, p)
            }
            None => (self.plan.clone(), self.plan_progress),
        };
        self.install(detour.plan)?;
        self.detour = Some(DetourContext {
            original,
            origin_progress,
            branch_point: detour.branch_point,
            rejoin_point: detour.rejoin_point,
        });
        self.mode = select_mode(self, params);
        Ok(())
    }

    /// Reinstalls the retained original plan at the robot's equivalent
    /// arclength. Returns that arclength, or `None` if no detour was active.
    pub fn revert(&mut self, params: &MotionParams) -> Option<f64> {
        let ctx = self.detour.take()?;
        let s = (ctx.origin_progress + self.plan_progress).min(ctx.original.total_length());
        let index = ctx.original.locate(s).unwrap_or(0);
        self.plan = ctx.original;
        self.plan_progress = s;
        self.primitive_index = index;
        self.rotate_latched = false;
        self.mode = select_mode(self, params);
        Some(s)
    }

    fn skip_rotations(&mut self) {
        while let Some(Primitive::Rotate(_)) = self.plan.primitives().get(self.primitive_index) {
            self.primitive_index += 1;
            self.rotate_latched = true;
        }
    }

    /// Moves to the next translational primitive. Returns true when the
    /// plan is finished.
    fn advance(&mut self) -> bool {
        self.plan_progress = self.plan.end_offset(self.primitive_index);
        self.primitive_index += 1;
        self.rotate_latched = false;
        self.skip_rotations();
        if self.primitive_index >= self.plan.primitives().len() {
            let goal = self.plan.goal();
            self.plan = PathPlan::empty(goal);
            self.plan_progress = 0.0;
            self.primitive_index = 0;
            self.rotate_latched = false;
            self.detour = None;
            return true;
        }
        false
    }

    /// Skips primitives whose targets are already within the arrival
    /// tolerance. Returns true if that finishes the plan.
    pub fn settle(&mut self, params: &MotionParams) -> bool {
        !self.plan.is_empty() && self.advance_arrived(params)
    }

    fn advance_arrived(&mut self, params: &MotionParams) -> bool {
        while let Some((_, d)) = self.target_geometry() {
            if d > params.arrive_tolerance {
                break;
            }
            if self.advance() {
                return true;
            }
        }
        false
    }

    /// One fixed-timestep controller update. `range_budget` caps the
    /// distance that may be translated (remaining battery range).
    pub fn step(&mut self, params: &MotionParams, dt: f64, range_budget: f64) -> StepReport {
        let mut report = StepReport::default();
        if self.hold == Hold::None && self.settle(params) {
            report.plan_completed = true;
        }
        let mode = select_mode(self, params);
        self.mode = mode;
        let budget = range_budget.max(0.0);
        match mode {
            Mode::Idle | Mode::Waiting | Mode::Charging => return report,
            Mode::RotateInPlace => {
                self.rotate_latched = true;
                let (alpha, _) = self.target_geometry().expect("rotating toward a target");
                let rot = alpha.signum() * (params.omega_max * dt).min(alpha.abs());
                self.pose.rotate(rot);
                report.rotated = rot;
            }
            Mode::ArcPursuit => {
                let target = self.target().expect("pursuing a target");
                let kappa = pursuit_curvature(&self.pose, target).unwrap_or(0.0);
                let mut v = params.v_max;
                if v * kappa.abs() > params.omega_max {
                    v = params.omega_max / kappa.abs();
                }
                let s = (v * dt).min(budget);
                let dir = self.pose.direction();
                self.pose.set_position(self.pose.position() + dir * s);
                self.pose.rotate(s * kappa);
                report.translated = s;
                report.rotated = s * kappa;
            }
            Mode::Forward => {
                let s = (params.v_max * dt).min(budget);
                let dir = self.pose.direction();
                self.pose.set_position(self.pose.position() + dir * s);
                report.translated = s;
            }
        }
        assert!(self.pose.is_finite(), "controller produced a non-finite pose");
        if report.translated > 0.0 {
            let end = self.plan.end_offset(self.primitive_index);
            self.plan_progress = (self.plan_progress + report.translated).min(end);
        }
        if self.advance_arrived(params) {
            report.plan_completed = true;
            self.mode = Mode::Idle;
        }
        report
    }
}

/// Threshold rule: rotate in place when the target is too far off-heading or
/// too close, otherwise arc toward it (or drive straight when aligned). Once
/// a rotation has started for a target, the robot rotates until facing it and
/// then drives forward.
pub fn select_mode(state: &RobotState, params: &MotionParams) -> Mode {
    match state.hold {
        Hold::Waiting => return Mode::Waiting,
        Hold::Charging => return Mode::Charging,
        Hold::None => {}
    }
    let Some((alpha, d)) = state.target_geometry() else {
        return Mode::Idle;
    };
    if state.rotate_latched {
        return if alpha.abs() > FACING_TOLERANCE && d > crate::geometry::DEGENERATE_DISTANCE {
            Mode::RotateInPlace
        } else {
            Mode::Forward
        };
    }
    threshold_rule(alpha, d, params)
}

/// The bare rule on signed angle and distance.
pub fn threshold_rule(alpha: f64, distance: f64, params: &MotionParams) -> Mode {
    if alpha.abs() > params.angle_threshold || distance < params.near_distance {
        Mode::RotateInPlace
    } else if alpha.abs() > params.signal_epsilon {
        Mode::ArcPursuit
    } else {
        Mode::Forward
    }
}
