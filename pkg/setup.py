import setuptools

with open('tandem/__version__.py') as fd:
    version = fd.read().split('=')[1].strip().strip("'")

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setuptools.setup(
    name="tandem",
    version=version,
    author="Intelematics",
    description="Ground-aerial exploration hand-over planner and simulator",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=['tests', 'tests.*', 'examples', 'examples.*']),
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
    ],
    python_requires='>=3.8',
    install_requires=[
        'numpy', 'scipy', 'shapely>=2.0', 'pandas', 'pyyaml', 'networkx', 'pillow', 'graphviz'
    ],
    extras_require={
        'test': ['pytest'],
    },
    entry_points={
        'console_scripts': ['tandem=tandem.cli:main'],
    },
)
