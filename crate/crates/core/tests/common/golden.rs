//! Small problems whose Lagrange functions have known printed forms.

pub const TWO_STATE: &str = "horizon 1
state x1 init 0
state x2 init 1
control u box -1 1
criterion integral \"-u^2\"
criterion terminal \"-x1^2\" at 1
constraint ode x1 \"x2\"
constraint ode x2 \"u\"
";

pub const FREDHOLM: &str = "horizon 1
state x
control u box -1 1
criterion integral \"-(x - t)^2 - u^2\"
constraint fredholm x \"t*tau*u\"
";

pub const SLACK: &str = "horizon 1
state x init 0
control u box -1 1
criterion integral \"x\"
constraint ineq \"1 - u^2\"
constraint ode x \"u\"
";

pub const MAXIMIN: &str = "horizon 1
control u box 0 2
criterion maximin \"u*(1 + t)\"
constraint integral \"u - 1\"
";
