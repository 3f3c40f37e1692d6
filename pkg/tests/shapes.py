"""Small hand-built scenes shared by the radiation and thermal tests."""
import numpy as np

from citybem.meshgen import FaceTag, TriMesh
from citybem.radiation import scene_from_mesh


def quad(p0, p1, p2, p3, face=0, tag=FaceTag.WALL, owner=None):
    """Planar quad p0..p3 counter-clockwise seen from the normal side."""
    v = np.array([p0, p1, p2, p3], dtype=float)
    return TriMesh(v, [(0, 1, 2), (0, 2, 3)], [tag, tag], [owner, owner], [face, face])


def slab_x(x, y0, y1, z0, z1, facing=1, face=0, tag=FaceTag.WALL):
    """Rectangle in the plane x = const, normal along +x or -x."""
    pts = [(x, y0, z0), (x, y1, z0), (x, y1, z1), (x, y0, z1)]
    if facing < 0:
        pts = pts[::-1]
    return quad(*pts, face=face, tag=tag)


def slab_z(z, x0, x1, y0, y1, facing=1, face=0, tag=FaceTag.ROOF):
    pts = [(x0, y0, z), (x1, y0, z), (x1, y1, z), (x0, y1, z)]
    if facing < 0:
        pts = pts[::-1]
    return quad(*pts, face=face, tag=tag)


def closed_box(x0, y0, z0, x1, y1, z1, inward=False):
    """Six faces numbered 0..5 (-x, +x, -y, +y, bottom, top)."""
    s = -1 if inward else 1
    faces = [
        slab_x(x0, y0, y1, z0, z1, facing=-s),
        slab_x(x1, y0, y1, z0, z1, facing=s),
        quad((x0, y0, z0), (x1, y0, z0), (x1, y0, z1), (x0, y0, z1)),
        quad((x0, y1, z0), (x0, y1, z1), (x1, y1, z1), (x1, y1, z0)),
        slab_z(z0, x0, x1, y0, y1, facing=-s, tag=FaceTag.GROUND),
        slab_z(z1, x0, x1, y0, y1, facing=s),
    ]
    if inward:
        for k in (2, 3):
            m = faces[k]
            faces[k] = TriMesh(m.vertices, m.triangles[:, ::-1], m.tags, m.owner, m.face)
    return TriMesh.merge(faces)


def scene(*meshes):
    return scene_from_mesh(TriMesh.merge(list(meshes)))
