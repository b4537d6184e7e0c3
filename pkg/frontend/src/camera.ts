// Orbit camera with a top-down toggle, projecting world points to canvas
// pixels. Pure math so it stays unit-testable away from any canvas.

export interface Vec3 {
  x: number;
  y: number;
  z: number;
}

export interface Projected {
  sx: number;
  sy: number;
  depth: number;
  visible: boolean;
}

export class OrbitCamera {
  yaw = Math.PI / 4;
  pitch = Math.PI / 5;
  distance = 120;
  target: Vec3 = { x: 0, y: 0, z: 0 };
  topDown = false;
  fovScale = 1.2;

  orbit(dYaw: number, dPitch: number): void {
    this.yaw = (this.yaw + dYaw) % (2 * Math.PI);
    const limit = Math.PI / 2 - 0.01;
    this.pitch = Math.min(limit, Math.max(-limit, this.pitch + dPitch));
  }

  zoom(factor: number): void {
    this.distance = Math.min(5000, Math.max(1, this.distance * factor));
  }

  toggleTopDown(): void {
    this.topDown = !this.topDown;
  }

  lookAt(p: Vec3): void {
    this.target = { ...p };
  }

  /** World -> camera frame (right-handed, camera looking down -z). */
  private toCamera(p: Vec3): Vec3 {
    const dx = p.x - this.target.x;
    const dy = p.y - this.target.y;
    const dz = p.z - this.target.z;
    if (this.topDown) {
      return { x: dx, y: dy, z: -this.distance };
    }
    const cy = Math.cos(this.yaw);
    const sy = Math.sin(this.yaw);
    const cp = Math.cos(this.pitch);
    const sp = Math.sin(this.pitch);
    // yaw about +z, then pitch about the camera's x axis
    const rx = cy * dx + sy * dy;
    const ry = -sy * dx + cy * dy;
    const x = rx;
    const y = cp * ry + sp * dz;
    const z = -sp * ry + cp * dz - this.distance;
    return { x, y, z };
  }

  project(p: Vec3, width: number, height: number): Projected {
    const c = this.toCamera(p);
    if (this.topDown) {
      const scale = (Math.min(width, height) * this.fovScale) / this.distance;
      return {
        sx: width / 2 + c.x * scale,
        sy: height / 2 - c.y * scale,
        depth: this.distance,
        visible: true,
      };
    }
    if (c.z > -0.5) {
      return { sx: 0, sy: 0, depth: -c.z, visible: false };
    }
    const f = (Math.min(width, height) * this.fovScale) / -c.z;
    return {
      sx: width / 2 + c.x * f,
      sy: height / 2 - c.y * f,
      depth: -c.z,
      visible: true,
    };
  }
}
