from setuptools import setup
from pathlib import Path

this_directory = Path(__file__).parent
long_description = (this_directory / "README.md").read_text()

setup(
    name='action_timelines',
    version='0.1.0',
    description='Temporal action detection as denoising diffusion over 1-D proposals',
    long_description=long_description,
    long_description_content_type='text/markdown',
    packages=['action_timelines'],
    install_requires=[
        'bokeh',
        'numpy',
        'torch',
        'tqdm',
    ],
    entry_points={'console_scripts': ['action-timelines=action_timelines.cli:main']},
)
