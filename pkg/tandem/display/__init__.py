''' Offline visual exports: PGM images, grid CSV tables and DOT graphs'''
import pathlib

import graphviz
import numpy as np
from PIL import Image


def write_pgm(image, path):
    '''Write a 2D array with values in [0, 255] as a binary PGM'''
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM images must be 2D, got shape {image.shape}")
    if image.size and (image.min() < 0 or image.max() > 255):
        raise ValueError("PGM values must lie in [0, 255]")
    Image.fromarray(image.astype(np.uint8)).save(path, format='PPM')


def read_pgm(path):
    '''Read an 8-bit grayscale PGM into a (rows, cols) uint8 array'''
    with Image.open(path) as image:
        if image.format != 'PPM' or image.mode != 'L':
            raise ValueError(f"{path} is not an 8-bit PGM ({image.format}, mode {image.mode})")
        return np.array(image, dtype=np.uint8)


def grid_layer_image(layer, scale=255.0):
    '''Map a (W, H) layer in [0, 1] to an image with y up; absent cells are 0'''
    values = np.nan_to_num(np.asarray(layer, dtype=float), nan=0.0)
    pixels = np.clip(np.floor(values * scale + 0.5), 0, 255).astype(np.uint8)
    return np.flipud(pixels.T)


def write_grid_pgm(grid, path, layer='trav_g'):
    write_pgm(grid_layer_image(grid.layers[layer]), path)


def write_grid_csv(grid, path):
    '''Header i,j,x,y,elevation,slope,roughness,step,risk,trav_g; absent values empty'''
    grid.to_dataframe().to_csv(path, index=False, na_rep='')


def graph_to_dot(graph) -> graphviz.Graph:
    '''ExplorationGraph as an undirected graphviz graph, frontiers drawn as boxes'''
    dot = graphviz.Graph(name=graph.level)
    for node in graph.sorted_nodes():
        dot.node(
            str(node.id),
            label=f'{node.id}\\n{node.gain:.2f}',
            shape='box' if node.is_frontier else 'ellipse',
            pos=f'{node.pose.x:.3f},{node.pose.y:.3f}!',
        )
    for a, b, length in graph.sorted_edges():
        dot.edge(str(a), str(b), len=f'{length:.3f}')
    return dot


def write_graph_dot(graph, path):
    pathlib.Path(path).write_text(graph_to_dot(graph).source)
